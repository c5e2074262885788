"""Dual-branch residual network for multi-bracket HDR fusion.

A self-contained numpy implementation: NCHW tensors with reverse-mode
autodiff, the operator zoo (standard / dilated / strided / deformable
convolution, attention gating, bilinear fusion), graph builders for the
network family, a symbolic parameter/MAC profiler, radiometric metrics, a
synthetic exposure-stack pipeline and a desk-scale trainer.
"""

from .errors import DataError, NumericError
from .tensor import Tensor, Tape, backward, grad_check
from .ops import (ConvParams, DeformParams, conv2d, deform_conv2d,
                  bilinear_upsample_x2, leaky_relu, relu, sigmoid, tanh_elem,
                  concat_channels)
from .graph import (NetworkConfig, GraphSpec, GraphBuilder, build_drhdr,
                    build_ahdr, build_variant_a, build_variant_b,
                    build_ours_star, build_graph, build_spatial_attention,
                    build_deformable_block, build_drdb, forward_eval,
                    init_weights, VARIANTS)
from .profiler import (CostReport, count_params, count_macs,
                       compare_to_reference, REFERENCE_COMPLEXITY)
from .imaging import (ExposureStack, gamma_adjust, mu_law, tanh_norm_p99,
                      percentile99, psnr, psnr_mu, read_pfm, write_pfm,
                      read_ldr8, write_ldr8)
from .data import (SceneParams, gen_scene, gen_dataset, crop_patches, augment,
                   split_dataset, save_stack, load_stack, load_dataset,
                   reference_passthrough)
from .train import (ScheduleSpec, lr_at, AdamState, adam_step,
                    l1_tonemapped_loss, encode_brackets, save_checkpoint,
                    load_checkpoint, TrainReport, fit, predict)

__version__ = "0.1.0"
