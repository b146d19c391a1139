"""Reference numbers used by the oracle tests and the ``score`` report."""

# Zero-shot MagicBrush table: Final Turn then All Turn, each L1, L2, CLIP-I, DINO, CLIP-T.
MAGICBRUSH_METRICS = [
    "final_l1", "final_l2", "final_clip_i", "final_dino", "final_clip_t",
    "all_l1", "all_l2", "all_clip_i", "all_dino", "all_clip_t",
]
MAGICBRUSH_DIRECTIONS = ["-", "-", "+", "+", "+", "-", "-", "+", "+", "+"]
MAGICBRUSH_TABLE = {
    "ACE++": [0.081, 0.032, 0.891, 0.817, 0.307, 0.047, 0.017, 0.936, 0.894, 0.306],
    "FLUX.1-Fill": [0.075, 0.025, 0.898, 0.839, 0.297, 0.044, 0.013, 0.947, 0.919, 0.300],
    "Q-Control": [0.078, 0.030, 0.898, 0.840, 0.322, 0.044, 0.016, 0.943, 0.912, 0.315],
    "BRIDGE": [0.076, 0.032, 0.907, 0.839, 0.324, 0.043, 0.017, 0.946, 0.910, 0.315],
}
MAGICBRUSH_PRINTED_RANK = {"ACE++": 3.7, "FLUX.1-Fill": 2.1, "Q-Control": 2.2, "BRIDGE": 2.0}

# ICE-Bench inpainting task, BRIDGE raw metrics and the final score printed for it.
TASK17_RAW = dict(aesthetic=5.214464, imaging=61.685315, clip_cap=0.277598, vllm_qa=0.952618,
                  clip_src=0.789001, l1_src=0.012815)
TASK17_REPORTED_SCORE = 0.656471

# Total GateBlock parameters reported for the 60-layer, 3072-wide backbone.
GATE_PARAMS_REPORTED = 13_313_340
GATE_PARAMS_DIM = 3072
GATE_PARAMS_LAYERS = 60
