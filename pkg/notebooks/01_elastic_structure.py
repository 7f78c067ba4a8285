# %% [markdown]
# # Nested sub-networks over one parameter store
#
# A small encoder is scored head-by-head and neuron-by-neuron, the scores pick
# seven nested structures, and each structure runs either by masking or by
# slicing the shared weights.

# %%
import numpy as np

from elasticlm import data, pruning
from elasticlm.model import MASKED, SLICED, ElasticModel, ModelConfig, compact

config = ModelConfig(n_layers=2, d_model=32, n_heads=8, head_dim=4, d_ff=64, vocab_size=256, max_len=32,
                     n_rel_heads=4, rel_head_dim=8)
teacher = ElasticModel.init(config, seed=0, std=0.2)
corpus = data.split_corpus(data.synthetic_corpus(50_000, seed=0))
rng = np.random.default_rng(0)
batches = [data.sample_windows(corpus.train, 8, 16, rng) for _ in range(4)]

# %% Expected absolute gate gradients, unit-normalized per layer
scores = pruning.normalize_scores(pruning.record_scores(teacher, batches, mask_rate=0.15, seed=0))
print(pruning.format_sidecar(scores))

# %% Seven nested structures from the scores
report = []
submap = pruning.derive_submap(scores, pruning.PRESERVING_LEVELS, report)
print("\n".join(report))
teacher = teacher.with_submap(submap)
for s in submap:
    print(f"level {s.level:>2}: {teacher.structure_parameters(s):>6} parameters, "
          f"{teacher.flops(s, 16):>8} matmul flops at length 16")

# %% Masking and slicing give the same hidden states
tokens = rng.integers(4, 200, size=(2, 12))
for s in submap:
    gap = np.abs(teacher.forward(tokens, s.level, MASKED).hidden.data
                 - teacher.forward(tokens, s.level, SLICED).hidden.data).max()
    print(f"level {s.level:>2}: max |masked - sliced| = {gap:.1e}")

# %% Compacting keeps only the largest structure's weights
student = compact(teacher, submap, seed=0)
print("teacher store:", teacher.n_parameters(), " student store:", student.n_parameters())
assert student.n_parameters() == teacher.structure_parameters(submap.largest)
