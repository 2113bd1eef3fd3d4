"""Block-sparse causal attention with 4-bit block selection and per-head calibration."""
from .calibrate import (CalibrationProfile, HeadCalibration, HeadProfile, calibrate_head,
                        calibrate_model, l1_error)
from .core import (BlockGrid, CausalClass, HeadInput, ShapeError, block_partition,
                   causal_block_class, full_attention)
from .kernels import ACTIVE_BACKEND, set_threads
from .quant import (QuantizedMatrix, approx_weight_block, max_then_dequantize, quantize_k,
                    quantize_q)
from .selection import (BlockMask, SelectionConfig, SinkLocalStats, compute_sink_local_stats,
                        plan_selection, relative_attention_score, segment_aggregate,
                        selection_pass, sink_local_index_set, threshold_bound)
from .sparse_exec import SparseAttentionOutput, block_sparse_attention, flop_accounting
from .workloads import WorkloadSpec, generate, read_tensor_file, write_tensor_file

__version__ = "0.1.0"
