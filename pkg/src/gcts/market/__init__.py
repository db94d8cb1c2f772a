from .program import DispatchProgram, InfeasibleError, ProgramResult, kkt_residuals, solve_program
from .clearing import (
    ClearingSolution,
    default_proxies,
    generation_cost,
    net_export,
    proxy_schedule,
    recover_boundary_state,
    resolve_proxies,
    solve_cts,
    solve_gcts,
    solve_gcts_n_area,
    solve_jed,
    solve_realtime,
    solve_realtime_proxy,
    solve_separate_clearing,
)

__all__ = [
    "ClearingSolution", "DispatchProgram", "InfeasibleError", "ProgramResult", "default_proxies",
    "generation_cost", "kkt_residuals", "net_export", "proxy_schedule", "recover_boundary_state",
    "resolve_proxies", "solve_cts", "solve_gcts", "solve_gcts_n_area", "solve_jed", "solve_program",
    "solve_realtime", "solve_realtime_proxy", "solve_separate_clearing",
]
