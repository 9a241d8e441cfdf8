"""Desk-scale SMLM simulation, degradation, localization and evaluation."""

from .camera import (
    CAMERA_PRESETS,
    CalibrationError,
    CalibrationResult,
    CameraModel,
    DegenerateFitError,
    DriftProfile,
    apply_camera,
    calibrate_mean_variance,
    dark_drift_profile,
    mean_variance_points,
)
from .codec import (
    CodecConfig,
    forward_transform4x4,
    inverse_transform4x4,
    quality_to_qp,
    qstep_for_qp,
    transcode_stack,
)
from .formats import (
    BadMagicError,
    EmitterTable,
    FrameStack,
    LocalizationTable,
    PayloadSizeError,
    RunConfig,
    StackFormatError,
    TableFormatError,
    TruncatedPayloadError,
    read_stack,
    read_table,
    stream_rng,
    write_stack,
    write_table,
)
from .localize import (
    FitResult,
    LocalizerConfig,
    detect_candidates,
    fit_gaussian,
    localize_stack,
)
from .metrics import (
    FrcResult,
    MatchReport,
    SweepReport,
    frc,
    match_to_gt,
    render,
    sweep_report,
    widefield,
    write_pgm,
)
from .network import (
    ArchiveError,
    DanglingSkipError,
    ShapeMismatchError,
    TrainingPair,
    TrainingSet,
    TruncatedBlobError,
    UpsampleGrid,
    WeightArchive,
    export_pairs,
    extract_table,
    infer,
    load_pairs,
    load_weights,
    make_pairs_from_localizations,
    make_pairs_simulated,
    nn_localize_stack,
    save_weights,
)
from .simulate import (
    BlinkModel,
    PsfModel,
    SimScene,
    generate_ground_truth,
    render_photon_map,
    simulate_stack,
)

__version__ = "0.1.0"
