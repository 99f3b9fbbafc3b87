"""Perforated convolutional networks in numpy.

Convolutions are evaluated exactly at a subset of output positions (the
perforation mask) through a row-subset im2row lowering, and interpolated
everywhere else.
"""

__version__ = "0.1.0"

from .core import (ShapeError, SpatialIndexSet, direct_conv, exact_rate, perforation_rate, read_kernel,
                   read_tensor, write_kernel, write_tensor)
from .lowering import DataMatrix, count_mults, im2row, kernel_matrix, matmul, stack_batch, unstack
from .masks import (MASK_TYPES, NeighborMap, PerforationMask, grid_mask, impact_mask, make_mask,
                    neighbor_map, pooling_mask, pooling_usage_counts, read_mask, top_n_by_weight,
                    uniform_mask, write_mask)
from .perfconv import (CompactActivation, InterpolationPlan, PerforatedConvLayer, build_plan,
                       fractional_stride_conv, interpolate, strided_conv)
from .network import (Network, NetworkSpec, TrainState, average_impacts, impact_field,
                      iterative_impact_perforation, sgd_finetune)
from .search import (DEFAULT_LADDER, CandidateEvaluation, PerforationConfig, evaluate_config,
                     exhaustive_search, greedy_configure, pareto_front)
from .bench import CostReport, account, layer_speedup, time_call, time_forward, time_interleaved
from .data import Dataset, synthetic_shapes
