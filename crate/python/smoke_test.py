"""Quick check that the extension module imports and runs end to end."""

import math
import os
import tempfile

import edgenav

book = edgenav.nf4_codebook()
assert len(book) == 16 and book[0] == -1.0 and book[-1] == 1.0

rows = [[math.sin(i * 7 + j) * 0.1 for j in range(40)] for i in range(8)]
q = edgenav.quantize(rows, block_size=32, scheme="nf4")
assert q.shape == (8, 40)
back = q.dequantize()
rel, worst = q.error(rows)
assert rel < 0.2 and worst < 0.05, (rel, worst)
assert len(back) == 8 and len(back[0]) == 40

assert abs(edgenav.entropy([0.25] * 4) - math.log(4)) < 1e-12

grid = edgenav.GridMap.generate(1, 12, 12, 0.2)
assert edgenav.GridMap.parse(grid.to_text()).to_text() == grid.to_text()
free = grid.free_cells()
obs = edgenav.observe(grid, free[0], "E", free[-1])
assert len(obs.window) == 7

config = """
[model]
num_layers = 3
d_model = 16
num_heads = 2
d_ff = 32
exit_layers = [1, 2]
exit_hidden = 8
lora_rank = 2
block_size = 16
"""
model = edgenav.Model(seed=0, config=config)
full = model.forward_full(obs)
assert len(full["exit_probs"]) == 2
assert abs(sum(full["final_probs"]) - 1.0) < 1e-5
out = model.dee_infer(obs, -1.0)
assert out["exit_layer"] == 3 and not out["early"]

quantized, report = model.quantize(seed=1)
assert quantized.mode == "quantized" and report
with tempfile.TemporaryDirectory() as d:
    path = os.path.join(d, "q.enqe")
    quantized.save(path)
    loaded = edgenav.Model.load(path)
    assert loaded.dee_infer(obs, 0.5) == quantized.dee_infer(obs, 0.5)

metrics = quantized.evaluate([grid], episodes=3, tau=0.5, max_steps=20)
assert 0.0 <= metrics["sr"] <= 1.0 and metrics["n_episodes"] == 3

try:
    edgenav.quantize(rows, block_size=0)
except ValueError:
    pass
else:
    raise AssertionError("block size 0 should be rejected")

print("smoke test ok")
