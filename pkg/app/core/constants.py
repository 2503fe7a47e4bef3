import math

# Weight presets for the experiment harness
WEIGHT_PRESETS: dict[str, list[float]] = {
    "w3": [0.59, 0.31, 0.1],
    "w4": [0.097, 0.519, 0.135, 0.249],
}

NATS_PER_BIT = math.log(2.0)

# CSV schemas (column order is part of the file contract)
BRNB_TRACE_COLUMNS = ["iter", "lb_best", "UB", "gap", "boxes_open", "sdr_solves"]
INAP_TRACE_COLUMNS = ["iter", "wsr", "surrogate", "cqp_status", "wallclock_ms"]
ADMM_TRACE_COLUMNS = [
    "outer_iter",
    "inner_iter",
    "wsr",
    "rel_gap",
    "max_rel_residual",
    "messages",
]
FW_TRACE_COLUMNS = ["iter", "wsr", "fw_gap", "step"]
RESULT_COLUMNS = [
    "schema_version",
    "seed",
    "algorithm",
    "K",
    "N",
    "wsr",
    "iterations",
    "wall_time_s",
    "gap",
    "ratio",
    "status",
]
CDF_COLUMNS = ["value", "percentile"]
COMPARE_COLUMNS = ["seed", "K", "N", "wsr_ncjt", "wsr_cb", "delta"]
