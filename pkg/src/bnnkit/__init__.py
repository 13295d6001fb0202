"""bnnkit: desk-scale binarized neural networks.

Training keeps real-valued latent weights that are binarized by sign on
every forward pass, clipped to [-1, 1] after every step, and stepped at a
fan-dependent per-layer learning rate. Inference runs bit-exactly on
packed words via XNOR+popcount with batchnorm folded into per-channel
thresholds.
"""

from .binary import (BinaryBlockConfig, LatentWeight, binarize_sign,
                     binary_conv_block, binary_conv_block_backward,
                     clip_latent, glorot_lr_scale, ste_backward)
from .data import Dataset, load_cifar10, load_idx
from .infer import (Deployment, ThresholdUnit, bench, binconv_infer,
                    compile_deployment, fold_bn_sign, load_deployment,
                    run_inference, save_deployment)
from .modelio import load_model, save_model
from .nets import (ArchSpec, LayerSpec, Model, alexnet_like_spec, build,
                   float_cnn_spec, table1_spec)
from .network import forward, backward, predict_logits, predict_proba, topk_accuracy
from .ops import (BatchNormState, ConvParams, ShapeError, batchnorm, conv2d,
                  dense, dropout, maxpool2d, scale_layer, softmax,
                  softmax_xent)
from .training import (DistillConfig, EpochMetrics, SoftTargetCache, TrainConfig,
                    combined_loss, distillation_recipe, generate_soft_targets,
                    hard_loss, soft_loss, train, train_teacher)
from .xnor import PackedBitTensor, pack, unpack, xnor_dot, xnor_gemm

__version__ = "0.1.0"
