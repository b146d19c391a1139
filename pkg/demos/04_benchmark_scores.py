"""Recomputing published benchmark numbers from their raw inputs.

The inpainting task score is rebuilt from its six raw metrics and compared
with the printed value; the MagicBrush table is re-ranked with mid-ranks.

    python demos/04_benchmark_scores.py
"""

from bridgeedit import evalkit, published

rec = evalkit.ice_dimensions(evalkit.RawMetrics(**published.TASK17_RAW))
print(f"aesthetic {rec.s_aes:.4f}  imaging {rec.s_img:.4f}  prompt {rec.s_pf:.4f}  source {rec.s_src:.4f}")
print(f"task score recomputed {rec.task_score:.6f}, printed {published.TASK17_REPORTED_SCORE:.6f}, "
      f"difference {rec.task_score - published.TASK17_REPORTED_SCORE:+.6f}")

ranks = evalkit.avg_rank(published.MAGICBRUSH_TABLE, published.MAGICBRUSH_DIRECTIONS)
print("\nmethod        mid-rank  printed")
for name, r in sorted(ranks.items(), key=lambda kv: kv[1]):
    print(f"{name:12}  {r:8.2f}  {published.MAGICBRUSH_PRINTED_RANK[name]:7.1f}")
