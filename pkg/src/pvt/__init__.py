"""Point/voxel attention: a sparse local branch over voxelized space fused
with a global point branch, plus the oracles and cost models to check it."""

__version__ = "0.1.0"

from .block import (BlockParams, CostReport, PvtConfig, PvtParams,
                    complexity_report, count_parameters, encoder_forward,
                    init_params, pvt_block_forward)
from .errors import (CapacityError, ConfigError, EmptyInputError,
                     NumericError, ParseError, PvtError, ResourceError,
                     ShapeError)
from .numerics import (LayerNormParams, MlpParams, layer_norm, matmul,
                       mlp_forward, relu, softmax_rows)
from .point_branch import (EaMemories, PointBranchParams, RprTables,
                           ea_op_count, external_attention,
                           point_branch_forward, quantize_index,
                           relative_attention, relative_bias, self_attention)
from .pointcloud import (PointCloud, load_point_cloud, normalize_unit_sphere,
                         random_cloud, save_point_cloud)
from .voxel_grid import (OccupancyStats, SparseVoxelGrid, devoxelize,
                         occupancy_stats, point_to_voxel_coord, voxelize)
from .window_attention import (RuleBook, SwaCost, SwaParams, WindowConfig,
                               build_rule_book, cost_global_attention,
                               cost_window_attention, cyclic_shift,
                               dense_window_attention_oracle,
                               reverse_cyclic_shift, swa_cost, swa_forward,
                               voxel_branch_forward)

__all__ = [name for name in dir() if not name.startswith("_")]
