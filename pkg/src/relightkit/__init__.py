"""relightkit: reflectance decomposition and relighting with SH lighting.

Recovers albedo, refined normals, shading and specular maps from a single
image plus rough initial geometry, then re-renders under novel illumination.
"""

from .decomposition import DecompositionSet
from .evalsynth import (
    SceneBundle,
    SyntheticScene,
    psnr,
    psnr_grad,
    render_synthetic,
    sphere_normal_map,
    ssim,
)
from .geometry import Camera, MeshScene, apply_blendshapes, load_blendshapes, load_obj, rasterize_normals
from .imgcore import (
    ImageBuffer,
    Mask,
    NormalMap,
    load_image,
    load_mask,
    load_normal_map,
    save_image,
    save_mask,
    spatial_gradients,
)
from .inverse import (
    DivergenceError,
    LossWeights,
    OptimizerConfig,
    SelfQuotientEmbedder,
    decompose,
    estimate_lighting_ls,
    identity_consistency_loss,
    parsimony_loss,
    reconstruction_loss,
    residual_l1,
    self_quotient_embedding,
    tv_loss,
)
from .sh import (
    EnvironmentMap,
    ShLighting,
    cosine_lobe_light,
    eval_sh_basis,
    eval_sh_radiance,
    front_light_init,
    project_env_to_sh,
    sample_random_lighting,
    sh_irradiance,
)
from .shading import blinn_phong_lobe, compose_render, relight, shading_map, specular_map

__version__ = "0.1.0"
