"""aligneval: an image-text alignment evaluation harness.

Builds chat-format instruction corpora from annotated prompt-image datasets,
scores them through closed-set logit backends with expectation calibration,
and evaluates predictions with rank/linear correlation and hit accuracy.
"""

__version__ = "0.1.0"

from .codec import (
    ELEMENT_DIGITS,
    RATING_LETTERS,
    Distribution,
    ElementCategory,
    LogitVector,
    RatingLevel,
    category_to_hit,
    closed_set_softmax,
    decode_level,
    encode_element_score,
    encode_total_score,
    expected_element_category,
    expected_total_score,
)
from .dataset import (
    DatasetSplit,
    ElementAnnotation,
    LoadReport,
    SamplePair,
    export_dataset,
    load_dataset,
    validate_sample,
)
from .instructions import (
    BuildOptions,
    InstructionRecord,
    build_element_instruction,
    build_total_instruction,
    build_training_corpus,
    perturb_element_label,
)
from .augment import (
    AugmentationSpec,
    ImageBuffer,
    augment_subset,
    brightness_adjust,
    grid_distort,
    random_crop,
)
from .inference import (
    Backend,
    BackendError,
    BackendRequest,
    HTTPBackend,
    MockBackend,
    Prediction,
    predict_element_scores,
    predict_total_score,
    query_closed_set_logits,
)
from .pipeline import (
    EnsembleSpec,
    PseudoLabeledSet,
    ensemble_elements,
    ensemble_total,
    merge_training_sets,
    pseudo_label_validation,
    two_stage_predict,
)
from .metrics import (
    MetricsReport,
    compute_report,
    element_accuracy,
    main_score,
    optimal_threshold_search,
    plcc,
    srcc,
)
