"""mmtprobe: a desk-scale multimodal machine translation workbench.

Builds tiny transformer translation models that can consume image patch
features through gated fusion or selective attention, constructs
insufficient-text probing corpora by masking colors, characters, and
nouns, generates planted-signal synthetic features for verification, and
evaluates with BLEU, restrict/relaxed probing accuracy, and congruent vs.
incongruent decoding.
"""

from .autodiff import DropoutRng, Tape, Tensor, backward
from .corpus import ParallelExample, Vocab, make_synthetic_corpus, read_token_lines, write_token_lines
from .features import (
    PAPER_REGIMES,
    FeatureRegime,
    PatchFeatures,
    SyntheticSpec,
    build_signal_table,
    generate_synthetic,
    read_features,
    shuffle_incongruent,
    write_features,
)
from .masking import (
    MASK_COLOR,
    MASK_CHAR,
    MASK_NOUN,
    MASK_NOUN_PLURAL,
    MaskLexicon,
    MaskRecord,
    MaskedExample,
    build_probing_corpus,
    mask_character,
    mask_color,
    mask_nouns,
    read_sidecar,
    write_sidecar,
)
from .model import (
    ModelConfig,
    TranslationModel,
    init_params,
    load_checkpoint,
    param_count,
    param_specs,
    save_checkpoint,
)
from .training import Adam, TrainConfig, average_checkpoints, lr_schedule, train
from .decoding import beam_decode, greedy_decode, translate_corpus
from .evaluation import (
    EvalReport,
    bleu,
    congruence_report,
    dump_attention,
    probing_accuracy,
)

__version__ = "0.1.0"
