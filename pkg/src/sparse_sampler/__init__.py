"""Sparse adaptive sampling toolkit.

Optimizes per-pixel sample density maps against synthetic Monte Carlo
scenes through a differentiable chain: stochastic-rounding radiance
estimators, a gather-based pyramidal reconstruction filter, and a filmic
tonemapping family, with blue-noise dithering for deployment-style
sample placement.
"""

from .banks import SampleBank, StreamingBank, generate_bank, take
from .density import (DensityMap, DitherMask, SampleAllocation, allocate,
                      normalize_density, uniform_density, void_cluster_mask)
from .estimators import (EstimatorConfig, EstimatorResult, estimate,
                         estimate_deterministic, estimate_gumbel,
                         estimate_relaxed, estimate_stochastic,
                         estimate_straight_through, expected_gradient_mc,
                         finite_difference_gradient, ramp_gain)
from .images import (LdrImage, MotionField, RadianceImage, read_pfm, warp,
                     write_pfm, write_png_srgb)
from .losses import (MaskImage, combined_loss, error_vs_density, mae,
                     make_mask, psnr, spatial_loss, temporal_loss)
from .optimize import RunConfig, compare_estimators, run, uniform_baseline
from .pyramid import (DemodMap, KernelField, PyramidStack, build_pyramid,
                      gather5, normalize_kernels, reconstruct, upsample2)
from .rng import PixelRngKey, pixel_uniform, uniform_grid
from .scenes import SceneSpec, builtin_scene, noise_std
# the tonemap() entry point itself stays on the submodule so the module name
# is not shadowed: sparse_sampler.tonemap.tonemap(...)
from .tonemap import (TmoParams, filmic, filmic_derivative, log_augment,
                      sample_tmo, tonemap_array, tonemap_backward)

__version__ = "0.1.0"
