"""Calibration run for the conditioning-fidelity criterion (dev only)."""
import sys
import time

import numpy as np

from gcdlab import rng as rngmod
from gcdlab.diffusion import (CascadeConfig, init_cascade, channels_from_pair,
                              conditioning_batch, train_stage, sample_cascade)
from gcdlab.embed import ByolConfig, FeatureConfig, byol_train, byol_embed, make_embedder, mask_object, node_features
from gcdlab.graphcond import EncoderConfig
from gcdlab.maskgraph import build_graph
from gcdlab.synthdata import SynthConfig, generate_sample

N_TRAIN = int(sys.argv[1]) if len(sys.argv) > 1 else 600
N_EVAL = int(sys.argv[2]) if len(sys.argv) > 2 else 100
STEPS = eval(sys.argv[3]) if len(sys.argv) > 3 else (2500, 1500, 1000)
SAMPLE_STEPS = int(sys.argv[4]) if len(sys.argv) > 4 else 24

t_all = time.time()
scfg = SynthConfig()
enc_cfg = EncoderConfig()
feat_cfg = FeatureConfig()

print("generating data...", flush=True)
train_pairs = [generate_sample(rngmod.derive_key(1, "tr", i), scfg) for i in range(N_TRAIN)]
eval_pairs = [generate_sample(rngmod.derive_key(1, "ev", i), scfg) for i in range(N_EVAL)]

print("byol...", flush=True)
crops = []
for img, mask in train_pairs[:150]:
    for inst in mask.instance_ids():
        crops.append(mask_object(img, mask, inst))
byol, hist = byol_train(np.stack(crops), ByolConfig(steps=300), seed=2)
print(f"  byol loss {hist[0]:.3f} -> {hist[-1]:.3f}", flush=True)

print("graphs...", flush=True)
def graphs_of(pairs):
    gs = []
    for img, mask in pairs:
        emb = make_embedder("extracted", img, mask, byol)
        gs.append(build_graph(mask, emb))
    return gs

train_graphs = graphs_of(train_pairs)
eval_graphs = graphs_of(eval_pairs)

stacks = np.stack([channels_from_pair(img, mask, 3) for img, mask in train_pairs])
feats = [node_features(g, feat_cfg, 32) for g in train_graphs]
cond = conditioning_batch(train_graphs, feats, enc_cfg)

cfg = CascadeConfig(train_steps=STEPS, sample_steps=SAMPLE_STEPS)
cascade = init_cascade(cfg, enc_cfg, feat_cfg, seed=3)
for s in range(3):
    t0 = time.time()
    h = train_stage(cascade, s, stacks, cond, seed=4)
    print(f"stage {s}: loss {h[0]:.1f} -> {np.mean(h[-50:]):.2f} ({time.time()-t0:.0f}s)", flush=True)

print("sampling...", flush=True)
t0 = time.time()
outs = []
B = 50
for i in range(0, N_EVAL, B):
    outs += sample_cascade(eval_graphs[i:i+B], cascade, seed=rngmod.derive_key(5, i))
print(f"  sampled {len(outs)} in {time.time()-t0:.0f}s", flush=True)

def class_counts(classes_map):
    c = [0, 0, 0]
    for cls in classes_map.values():
        c[cls - 1] += 1
    return c

hits = 0
diffs = []
for g, (img, mask) in zip(eval_graphs, outs):
    want = [0, 0, 0]
    for cls in g.classes:
        want[cls - 1] += 1
    got = class_counts(mask.classes)
    d = [abs(a - b) for a, b in zip(want, got)]
    diffs.append(d)
    if max(d) <= 1:
        hits += 1
print(f"count-match rate: {hits}/{len(outs)} = {hits/len(outs):.2f}")
print("mean abs diff per class:", np.mean(diffs, axis=0))
print(f"total {time.time()-t_all:.0f}s")
