"""viewtoken: 3D view tokens for frozen text-to-image diffusion models.

Learn word embeddings predicted from camera parameters by a small neural
mapper, so that a frozen diffusion backend renders a scene from a requested
viewpoint. Supports single-scene optimization, multi-scene pretraining,
view-controlled generation, and novel view synthesis from as little as one
posed image. A deterministic differentiable mock backend makes the whole
pipeline trainable and testable on a CPU.
"""

__version__ = "0.1.0"

from .backend import (
    BackendDescriptor,
    DiffusionBackend,
    LossSample,
    MockBackend,
    MockBackendConfig,
)
from .conditioning import (
    ConditioningRequest,
    FreeEmbeddingSource,
    MapperTokenSource,
    PromptTemplate,
    assemble_request,
    build_prompt,
    load_template_pool,
    sample_text_template,
)
from .data import (
    AugmentationConfig,
    SceneManifest,
    SplitSpec,
    augment,
    dtu_splits,
    load_scene,
    resize_policy,
    synth_scene,
)
from .encoding import ConditioningInput, EncoderConfig, FourierEncoder, scene_encoder_variant
from .geometry import (
    CameraPose,
    NormalizationStats,
    PoseVector,
    SphericalRanges,
    classify_view,
    fit_normalization,
    to_pose_vector,
)
from .mappers import (
    MapperConfig,
    TokenMapper,
    TokenPrediction,
    init_mapper,
    parameter_count,
    predict_scene_token,
    predict_view_token,
)
from .metrics import (
    MetricsReport,
    MockPerceptualAdapter,
    PerceptualAdapter,
    evaluate_nvs,
    lpips,
    psnr,
    render_grid,
    ssim,
)
from .training import (
    AdamW,
    Checkpoint,
    TrainConfig,
    TrainResult,
    finetune_nvs,
    load_checkpoint,
    oracle_free_embedding,
    pretrain_multi_scene,
    save_checkpoint,
    train_single_scene,
)
