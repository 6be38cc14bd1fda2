"""GRASP: retrieval-augmented embedding enhancement for sequential recommenders.

The package wires together five stages:

* ``dataset``    -- interaction-log ingestion, leave-one-out splits,
  head/tail popularity partitions, negative sampling.
* ``embedstore`` -- frozen semantic embedding matrices, exact top-k cosine
  retrieval with self-exclusion, pooled neighbor caches, and a synthetic
  cluster-structured corpus generator for desk-scale experiments.
* ``hae``        -- holistic attention enhancement: sigmoid-gated self /
  similar / global branches over the frozen embeddings plus a learnable
  fusion MLP, with hand-written analytic gradients.
* ``backbone``   -- trainable sequential encoders (GRU4Rec, SASRec).
* ``trainer`` / ``evaluation`` -- BCE training with Adam and early stopping,
  and the 100-negative NDCG/HR evaluation protocol with group reporting.

The ``grasp`` CLI (see ``grasp.cli``) exposes the full pipeline:
``synth -> build-db -> train -> eval -> report`` plus ablation and
hyper-parameter sweeps.
"""

__version__ = "0.1.0"
