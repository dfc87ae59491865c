from .ablation import ABLATION_KINDS, COLUMNS, DEFAULT_GRIDS, ablate
from .baselines import (QuerySet, compare_skip, embedding_kb, fidelity_ratio, ground_truth, key_comparison,
                        make_queries, reference_states, vanilla_skip)
from .bound import BoundReport, bound_check, lipschitz_estimate
from .metrics import MetricReport, frechet_from_moments, frechet_sq, median_bandwidth, metric_report, mmd_sq
