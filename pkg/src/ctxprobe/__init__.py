"""Fixed-context word embeddings via attention masking, and the fMRI
encoding pipeline that estimates per-parcel context windows."""

__version__ = "0.1.0"

from .model import AttentionMask, Checkpoint, ModelConfig, extract_layer, forward, load_checkpoint
from .tokenizer import Vocabulary, TokenizedText, decode, encode, encode_words, load_vocabulary
from .windows import (
    DEFAULT_SCHEDULE,
    EmbeddingSet,
    WindowedInput,
    build_windowed_input,
    context_schedule,
    generate_embeddings,
)
from .encoding import (
    BoldRun,
    DesignMatrix,
    RScoreMap,
    build_design,
    cross_validated_r,
    hrf,
    pearson_r,
    ridge_fit,
)
from .roistats import (
    ContextResult,
    ParcelAtlas,
    RoiCurve,
    bh_fdr,
    fit_slope,
    group_ttest,
    max_context_size,
    roi_score,
    select_roi_voxels,
)
