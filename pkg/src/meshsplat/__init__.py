"""meshsplat: mesh-driven Gaussian-splat avatars on a self-contained numpy stack.

Subpackage map:
    tensor     reverse-mode autodiff core
    optim      Adam optimizer
    gradcheck  finite-difference gradient validation
    meshes     triangle meshes, graph operators, sampling hierarchy
    graphnets  Chebyshev graph convolutions and the two graph U-nets
    clouds     Gaussian attribute containers and neural-Gaussian spawning
    render     differentiable tile rasterizer + brute-force reference
    tracking   graph-guided refinement of expression/pose tracking
    enhancer   depth-modulated image U-net
    losses     training losses and image metrics
    synthetic  synthetic animated-mesh dataset generator
    pipeline   two-stage training, evaluation, checkpoints
    cli        command-line front end
"""

from .tensor import Tensor, set_default_dtype, default_dtype, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "set_default_dtype", "default_dtype", "no_grad", "__version__"]
