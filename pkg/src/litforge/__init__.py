"""Corpus building, alignment, scoring and post-editing tools for literary translation."""

__version__ = "0.1.0"

from .aligner import PairAlignment, SentenceAlignmentPath, needleman_wunsch, project_to_paragraphs
from .corpus import AlignmentRecord, Book, Corpus, parse_corpus, serialize_corpus, validate_corpus
from .metrics import aggregate_scores, bleu, corpus_report
from .stats import binomial_test, krippendorff_alpha, paired_bootstrap, wilcoxon_pratt

__all__ = [
    "AlignmentRecord", "Book", "Corpus", "PairAlignment", "SentenceAlignmentPath", "__version__",
    "aggregate_scores", "binomial_test", "bleu", "corpus_report", "krippendorff_alpha",
    "needleman_wunsch", "paired_bootstrap", "parse_corpus", "project_to_paragraphs",
    "serialize_corpus", "validate_corpus", "wilcoxon_pratt",
]
