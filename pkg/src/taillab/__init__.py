"""Instance-level probability estimation error for autoregressive sequence models.

The package builds ground-truth languages with exactly computable sequence
probabilities, trains candidate models on samples from them, and measures
where the candidates' probability estimates deviate across the heavy tail.
"""

from .core import (
    SeededRng,
    SequenceModel,
    Vocabulary,
    enumerate_sequences,
    log_sum_exp,
    total_probability_mass,
)
from .lang import (
    GroundTruthLanguage,
    LanguageSpec,
    TabularAutoregressiveModel,
    build_language,
    load_language,
    next_distribution,
    sample_corpus,
    sample_sequence,
    save_language,
    score_sequence,
    temper,
)

__version__ = "0.1.0"

__all__ = [
    "GroundTruthLanguage",
    "LanguageSpec",
    "SeededRng",
    "SequenceModel",
    "TabularAutoregressiveModel",
    "Vocabulary",
    "build_language",
    "enumerate_sequences",
    "load_language",
    "log_sum_exp",
    "next_distribution",
    "sample_corpus",
    "sample_sequence",
    "save_language",
    "score_sequence",
    "temper",
    "total_probability_mass",
]
