"""Task-aware vector-quantized CSI compression with loss-resilient
edge/server streaming: codec, synthetic data, training, lost-index
recovery, transport, and evaluation metrics."""

from .autodiff import (Adam, SGD, Tensor, backward, conv2d, conv_transpose2d,
                       detach, gather_rows, gradients, layer_norm, log, matmul,
                       relu, reshape, sigmoid, softmax, square, straight_through,
                       tmean, transpose, tsum)
from .codec import (LOST, Bitstream, Codebook, CompressedDataset, IndexMap,
                    bits_for, compression_rate, dequantize, kmeans_resize,
                    load_codebook, load_compressed, make_codebook, pack,
                    quantize, raw_cost_bytes_per_sec, raw_cost_mbps,
                    save_codebook, save_compressed, unpack)
from .config import RunConfig, build_config, load_config_file
from .data import (CsiFrame, Dataset, MultipathScene, PoseLabel, load_dataset,
                   make_dataset, random_scene, save_dataset, synth_frame)
from .metrics import (EvalReport, dump_embeddings, evaluate_bundle, format_report,
                      mpjpe, nmse_db, pck)
from .models import (ModelBundle, LossReport, adaptive_lambda, build_bundle,
                     gan_losses, keypoint_loss, load_model, save_model, train,
                     vq_loss)
from .recovery import (IndexTransformer, MaskSpec, apply_mask, heldout_nll,
                       recover, train_transformer)
from .transport import (DoubleBuffer, LossModel, ProxyHandle, ServerHandle,
                        edge_run, meter, server_run)

__version__ = "0.1.0"
