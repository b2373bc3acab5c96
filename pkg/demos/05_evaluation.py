"""Evaluation metrics: per-category F1, analogy-marker ratio, token cost.

Run with: python demos/05_evaluation.py
"""

import numpy as np

from coapipe import DEFAULT_TAXONOMY
from coapipe.metrics import (
    coa_ratio,
    confusion,
    f1_report,
    render_text_report,
    token_cost,
)

# ---------------------------------------------------------------------
# A synthetic evaluation run: mostly-correct predictions over 6 categories.

rng = np.random.default_rng(0)
cats = DEFAULT_TAXONOMY.categories
golds = [cats[i % 6] for i in range(240)]
preds = [
    g if rng.random() > 0.18 else cats[int(rng.integers(0, 6))] for g in golds
]

report = f1_report(confusion(preds, golds, DEFAULT_TAXONOMY))
print(render_text_report(report, DEFAULT_TAXONOMY))

# ---------------------------------------------------------------------
# Analogy-marker ratio over raw completions: outputs that cite a similar
# case, a precedent or a reference case count as analogical.

outputs = [
    "Analysis Process: This mirrors a similar case about stereotypes.\n"
    "Harmful Content: none\nClassification Result: Harmless",
    "Analysis Process: Like the precedent in the examples, this is a slur.\n"
    "Harmful Content: the slur\nClassification Result: Bias",
    "Analysis Process: Plain step-by-step reading, no citations.\n"
    "Harmful Content: none\nClassification Result: Harmless",
]
stats = coa_ratio(outputs)
print(f"analogical outputs: {stats.n_analogical}/{stats.n_outputs} = {stats.ratio:.1f}%")

# ---------------------------------------------------------------------
# Token-cost arithmetic: extra completion tokens per F1 point gained.

cost = token_cost([332.9], [0.0], 89.2, 64.3, unit="points")
print(
    f"{cost.mean_extra_tokens:.1f} extra tokens for {cost.delta_f1_points:.1f} F1 points "
    f"-> {cost.tokens_per_f1_point:.1f} tokens per point"
)
