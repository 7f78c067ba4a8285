# %% [markdown]
# # Distilling an elastic student and finetuning it as a retriever
#
# A shortened version of the desk pipeline. The full-size run
# (`elasticlm pretrain-teacher ...` with the default configuration) takes a few
# minutes; this one takes well under a minute.

# %%
from elasticlm import pipeline as P

config = P.RunConfig.from_dict({
    "model": {"n_layers": 2, "d_model": 32, "n_heads": 8, "head_dim": 4, "d_ff": 64, "n_rel_heads": 4,
              "rel_head_dim": 8},
    "corpus_bytes": 200_000,
    "pretrain": {"steps_per_epoch": 60},
    "distill": {"steps_per_epoch": 30},
    "finetune": {"dense": {"steps_per_epoch": 300, "batch_size": 16, "learning_rate": 3e-3}},
    "retrieval": {"eval_passages": 64},
})

# %% Teacher, scores, submap
corpus = P.load_corpus(config)
teacher, trace = P.train_teacher(config, corpus)
print("held-out MLM", trace.notes["heldout_before"], "->", trace.notes["heldout_after"])
_, submap, _ = P.score_teacher(teacher, corpus, config)

# %% Relation distillation traverses every level each step
student, trace = P.distill_student(teacher, submap, corpus, config)
for lv in student.submap.levels:
    print(f"level {lv:>2}: held-out align {trace.notes['heldout_before'][lv]:.3e} "
          f"-> {trace.notes['heldout_after'][lv]:.3e}")

# %% Dense retrieval: queries at each level, passages at the largest
dense, _ = P.finetune_student(student, "dense", config)
index, metrics = P.eval_retrieval(dense, config)
for lv, m in metrics.items():
    print(f"level {lv:>2}: recall@5 {m['recall@5']:.3f}  mrr@20 {m['mrr@20']:.3f}")
