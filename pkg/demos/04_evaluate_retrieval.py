"""
Exact retrieval evaluation: composed queries vs baselines
=========================================================

Rank the gallery by cosine for every eval query and report Recall@K for the
trained composition against checkpoint-free baselines. Ranking is an exact
full sweep with deterministic tie-breaking, so identical inputs always
produce identical reports.
"""

from scotkit import (
    GalleryIndex,
    evaluate,
    gen_dataset,
    gen_world,
    init_params,
    recall_subset_at_k,
    search,
    train,
)
from scotkit.combiner import forward
from scotkit.training import TrainConfig

# Same setup as the training demo, then evaluate four query modes.
world = gen_world(c=8, d=16, sigma_img=0.08, sigma_txt=0.08, seed=1)
dataset = gen_dataset(world, n_train=400, n_eval=40, gallery_size=64, seed=2)
result = train(dataset.examples, TrainConfig(epochs=10, batch_size=32, seed=4),
               init_params(d=16, seed=3))

index = GalleryIndex(dataset.gallery)
for mode in ("scot", "image_plus_text", "text_only", "image_only"):
    params = result.params if mode == "scot" else None
    report = evaluate(index, params, dataset.queries, dataset.eval_mods,
                      ks=(1, 5, 10), mode=mode)
    print(report.to_text())

# Subset recall ranks only each query's labelled candidate pool, the
# protocol used when full gallery labels are unavailable.
r1_subset = recall_subset_at_k(index, result.params, dataset.queries,
                               dataset.eval_mods, k=1)
print(f"subset recall@1 (6 candidates/query): {r1_subset:.3f}\n")

# A single ad-hoc search: fuse one reference image with one edit embedding
# and rank the gallery. The gate scalar s is part of the answer.
query = dataset.queries[0]
v_ref = dataset.gallery.row(query.reference_id)
t_m = dataset.eval_mods.row(query.id)
composed, s, _ = forward(result.params, v_ref, t_m)
top = search(index, composed, k=5)
print(f"query {query.id}: edit {query.modification_text!r}, gate s={s:.3f}")
for rank, (gid, score) in enumerate(zip(top.ids, top.scores), start=1):
    marker = " <- target" if gid == query.target_id else ""
    print(f"  {rank}. {gid}  {score:.4f}{marker}")
