"""Association-chain evaluation harness.

Transforms any labeled image corpus into multi-step association tasks and
runs them against model backends and human testers: annotation-free task
construction, data refinement, memory-augmented prompting, chain execution
with step accounting, metric reports, and an HTTP session service.
"""

__version__ = "0.1.0"

from .corpus import Corpus, ConceptVocabulary, Sample, load_manifest

__all__ = ["Corpus", "ConceptVocabulary", "Sample", "load_manifest", "__version__"]
