"""Microscale planar electrical capacitance tomography.

Forward simulation of planar-array capacitances, a transposed-convolution
reconstruction network trained with a learnable compound loss, classical
linear baselines, and evaluation metrics.
"""
from .forward import ForwardModel, PhysicalPermittivity, capacitance_matrix, normalize
from .geometry import DomainSpec, build_mesh, pixel_element_map
from .linear_inverse import (landweber, linear_back_projection, sensitivity_matrix,
                             tikhonov_iterative)
from .metrics import evaluate, iou, mse, pearson_cc, psnr, ssim, stitch
from .network import NetworkConfig, TrainConfig, load_model, predict, save_model, train
from .phantoms import (Dataset, NoiseModel, PhantomSpec, add_noise, build_dataset, gen_phantom,
                       read_dataset, split, write_dataset)

__version__ = "0.1.0"
