"""Full-reference image quality assessment with a two-stream multi-scale CNN.

The network, its layers and their gradients are implemented directly in
numpy; see ``numerics`` for the primitives and ``model`` for the assembly.
"""
from .data import (load_manifest, read_image, residual_map, split_by_reference,
                   synth_generate)
from .evaluation import EvalReport, evaluate, logistic_fit, plcc, psnr, srcc, ssim
from .model import (ModelConfig, build_model, forward, backward, load_checkpoint,
                    predict_image, save_checkpoint)
from .optim import TrainConfig, l2_loss, sgd_step, train

__version__ = "0.1.0"
