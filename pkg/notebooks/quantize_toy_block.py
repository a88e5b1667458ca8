"""
Quantizing a toy attention block
================================

Generate a random block with calibration data, quantize all four
projections at 3 bits with each method and compare reconstruction errors.
"""

import tempfile
from pathlib import Path

from attnquant import io as tio
from attnquant.quant import QuantConfig
from attnquant.solver import quantize_block

# a 16-wide block with 4 heads and 8 calibration sequences of 32 tokens
workdir = Path(tempfile.mkdtemp())
block, calib = tio.gen_toy_model(workdir, d=16, heads=4, seq_len=32, n_samples=8, seed=0)
print("toy model written to", workdir)

# the same block under rtn, gptq and boa
for method in ("rtn", "gptq", "boa"):
    q = quantize_block(block, calib, QuantConfig(bits=3, method=method))
    per_layer = {n: round(r.metrics["layer_recon_error"], 3) for n, r in q.layers.items()}
    print(f"{method:5s} attention error {q.metrics['attention_recon_error']:8.3f}  {per_layer}")

# codes, scales and zero points come out per row
res = quantize_block(block, calib, QuantConfig(bits=3)).layers["w_q"]
print("first row of w_q codes:", res.codes[0])
print("row scales:", res.scales[:4], "zeros:", res.zeros[:4])
