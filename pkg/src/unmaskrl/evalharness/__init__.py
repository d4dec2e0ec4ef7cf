"""Pareto sweeps, brute-force oracles and the verification battery."""
from .oracle import MAX_ORACLE_LEN, OracleResult, brute_force_best, enumerate_posterior
from .sweep import (
    CSV_HEADER,
    Method,
    ParetoRow,
    heuristic_methods,
    load_policy,
    mean_reward,
    pareto_sweep,
    policy_methods,
    read_csv,
    rows_to_csv,
    run_method,
    summarize,
    write_csv,
)
from .verify import Report, gradient_errors, verify_suite

__all__ = [name for name in dir() if not name.startswith("_")]
