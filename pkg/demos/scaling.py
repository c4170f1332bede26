"""Encode time against sequence length for the recurrent scan and the dense SSD path.

Run: python3 demos/scaling.py
"""

import time

import numpy as np

from hyperssm import encoder as enc
from hyperssm.encoder import EncoderConfig, SentenceEncoder

vocab = enc.Vocab(["<pad>", "<unk>"] + [f"w{i}" for i in range(500)])
rng = np.random.default_rng(0)
for mode in ("scan", "ssd"):
    model = SentenceEncoder(EncoderConfig.desk(len(vocab), max_len=1024, dropout=0.0, ssm_mode=mode), vocab)
    prev = None
    for n in (64, 128, 256, 512, 1024):
        ids = rng.integers(2, len(vocab), size=(8, n))
        mask = np.ones_like(ids, dtype=bool)
        model.forward(ids, mask)
        times = []
        for _ in range(5):
            t0 = time.perf_counter()
            model.forward(ids, mask)
            times.append(time.perf_counter() - t0)
        t = float(np.median(times))
        ratio = "" if prev is None else f"  x{t / prev:.2f} vs L/2"
        print(f"{mode:>4} L={n:>4}: {t * 1e3:8.1f} ms{ratio}")
        prev = t
