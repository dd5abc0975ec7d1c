"""Training-free low-resolution preview sampling for rectified-flow models.

The sampler integrates a learned (or analytic) velocity field at full
resolution up to a chosen step, swaps the latent for a commutator-minimizing
strided subsample, and continues at low resolution under a fixed-point
correction that reuses the stored full-resolution velocity.  The result is a
low-resolution sample that tracks what the full-resolution run would have
produced from the same seed, at a fraction of the evaluation cost.
"""

from .commutator import CommutatorReport, commutator, commutator_norm, select_operator
from .dataset import BlobScene, ToyDataset
from .errors import (
    ContractError,
    DegenerateDataError,
    DimensionError,
    DivisibilityError,
    GridError,
    IntegrationError,
    PreviewflowError,
    SchemaError,
    ScheduleError,
    TrainingError,
    UnpairedRunError,
)
from .fields import BlurField, ChannelAffineField, VelocityField, cfm_loss, cfm_target, interpolate
from .grid import (
    LatentGrid,
    SeededRng,
    TimestepSchedule,
    export_image,
    gaussian_noise,
    grid_norm,
    linear_schedule,
    load_grid,
    save_grid,
)
from .guidance import GuidanceState, guidance_step, guidance_target
from .metrics import block_average, cosine, cosine_trace, piqe, psnr
from .operators import (
    OperatorFamily,
    SelectionOperator,
    apply,
    build_family,
    dense_matrix,
    family_from_permutations,
    nearest_operator,
    refresh_duplicates,
    translate_operator,
    warp_operator,
)
from .sampler import (
    HRRun,
    PreviewConfig,
    RunReport,
    modeled_cost,
    modeled_speedup,
    sample_baseline,
    sample_hr,
    sample_manipulated,
    sample_preview,
)
from .stats import PairedSample, cg_effect_study, cosine_consistency_study, wilcoxon_signed_rank
from .toynet import (
    ToyNetConfig,
    ToyNetField,
    TrainResult,
    grad_check,
    load_checkpoint,
    save_checkpoint,
    train_toy,
)

__version__ = "0.1.0"
