"""
Training on generated skeletons and fusing modalities
=====================================================

A small synthetic dataset stands in for recorded skeletons.  One compact
network is trained per input modality (joints, bones and their frame
differences), and the four softmax score sets are summed.  Runs in well under a
minute on one CPU core.
"""

import numpy as np

from ctrgcn import network as nw
from ctrgcn import skeleton as sk
from ctrgcn import training as tr

spec = sk.SyntheticSpec(num_classes=4, samples_per_class=20, frames=32)
data = sk.synthesize_dataset(spec, seed=0)
labels = np.array([s.label for s in data.subset("test")])
print(f"{len(data.subset('train'))} training and {len(labels)} test sequences, {spec.num_classes} classes")

config = nw.ModelConfig(num_classes=4, channels=(8, 8, 16, 16), strides=(2, 2, 2, 1), num_persons=1, frames=32)
schedule = tr.Schedule(base_lr=0.1, warmup_epochs=2, decay_epochs=(8,), total_epochs=10)

streams = []
for modality in sk.MODALITIES:
    derived = data.map(lambda s: sk.derive_modality(s, data.graph, modality))
    model = nw.build_model(config, seed=0)
    log = tr.train(model, derived.subset("train"), derived.subset("test"), schedule, seed=0)
    print(f"\n{modality}: last epoch  {log.lines()[-1]}")
    stream = tr.stream_scores(model, derived.subset("test"), derived.subset_ids("test"), modality)
    streams.append(stream)
    print(f"{modality}: test top-1 {tr.accuracy(np.argmax(stream.scores, axis=1), labels):.3f}")

fused = tr.fuse_scores(streams)
print(f"\nfused test top-1 {tr.accuracy(fused.predictions, labels):.3f}")
