"""Score a few hand-written caption pairs with every metric, no model needed.

    python3 demos/metrics_tour.py
"""

from regcap.metrics import EvalPair, StaticEmbeddings, evaluate, paired_test, per_item_scores
from regcap.tensor import Rng

pairs = [
    EvalPair.from_text("ct scan showing a mass in the left lobe", "ct scan showing a mass in the left lobe", "CT"),
    EvalPair.from_text("a b c d", "a c b d", "CT"),
    EvalPair.from_text("the cat sat", "the cat sat down", "MRI"),
    EvalPair.from_text("chest radiograph normal", "frontal chest x-ray without abnormality", "XRAY"),
]

# Two-dimensional toy embeddings: "normal" and "without abnormality" point the same way.
# Words missing from the table embed as zero vectors, so only the XRAY pair scores here.
emb = StaticEmbeddings({
    "normal": [1, 0], "without": [0.9, 0.1], "abnormality": [0.8, 0.2], "chest": [0, 1],
    "radiograph": [0.2, 1], "x": [0.25, 1], "ray": [0.25, 1],
})

report = evaluate(pairs, emb)
print(report.to_table())

# Per-item scores feed the paired tests used to compare systems.
a = per_item_scores(pairs, emb)["rouge_l"]
b = [s * 0.9 for s in a]
res = paired_test(a, b, iters=2000, rng=Rng(0))
print(f"ROUGE-L of A vs a 10% worse B: diff {res.observed_diff:+.3f}, p={res.p_value:.3f} on n={res.n}")
