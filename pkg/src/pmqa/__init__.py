"""Literature-grounded biomedical question answering over PubMed.

Pipeline stages: plan a boolean search query from candidate MeSH terms,
iteratively critique and refine it against live result metadata,
retrieve evidence in early-stopping batches, and synthesize a final
answer with inline PMID citations.  A benchmark harness measures cost,
retrieval depth, grounding rate, accuracy, and pairwise explanation
quality across the pipeline and three baseline modes.
"""

__version__ = "0.1.0"
