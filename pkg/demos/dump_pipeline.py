"""Export generator activations to a dump file, inspect it, then train from it.

    python3 demos/dump_pipeline.py
"""

import os
import tempfile

import numpy as np

from sae_forge.ingest import DumpReader, ShuffleBuffer, export_synthetic, stream_batches
from sae_forge.synthgen import build_model
from sae_forge.trainer import TrainConfig, train

model, hierarchy = build_model()
path = os.path.join(tempfile.mkdtemp(), "toy.saedump")
export_synthetic(path, model, hierarchy, seed=3, n_rows=64 * 40, seq_len=64, p_mask=0.3)

reader = DumpReader(path)
h = reader.header
print(f"{len(reader)} rows, D={h.d}, {h.label_width} label columns, record {h.record_size} bytes")
print("metadata:", h.metadata)

# a shuffled pass over the file, 256 rows at a time
batch = next(stream_batches(reader, 256, ShuffleBuffer(1024, seed=0)))
print("first batch", batch.x.shape, "masked fraction", np.mean(batch.mask_flags).round(3))

# the dump was written with p=0.3, so the trainer must be told the same
r = train(TrainConfig(data_path=path, p_mask=0.3, steps=30, repeat_data=True))
print(f"trained {len(r.log)} steps from the dump, final recon {r.log[-1].recon:.4f}")
