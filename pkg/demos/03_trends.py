"""Every trend measurement on the 200-shape desk corpus (about a quarter of an hour).

Writes trends.csv next to the working directory and prints one line per check.

Run: python demos/03_trends.py [config]
"""
import sys
import time
from pathlib import Path

from condshape import experiments as ex
from condshape.config import load_config
from condshape.synthdata import generate_dataset

path = sys.argv[1] if len(sys.argv) > 1 else Path(__file__).resolve().parents[1] / "configs" / "acceptance.ini"
cfg = load_config(path)
d = cfg["data"]
ds = generate_dataset(d["shapes"], cfg.families(), cfg.ring(), symmetric=d["symmetric"],
                      sample_resolution=d["sample_resolution"], seed=0)
t0 = time.perf_counter()
res = ex.trend_suite(ds, cfg, log=lambda msg: print(f"[{time.perf_counter() - t0:5.0f} s] {msg}", flush=True))

rows = [("diversity", f"beta={b:g}", v) for b, v in res["diversity"].items()]
for seed, table in res["inference"].items():
    rows += [("inference", f"seed={seed} {mode}", v) for mode, v in table.items()]
    rows.append(("deterministic", f"seed={seed}", res["deterministic"][seed]))
rows += [("views", f"n={n}", v) for n, v in res["views"].items()]
rows.append(("pearson_r", f"episodes={res['episodes']}", res["pearson_r"]))
with open("trends.csv", "w") as fh:
    fh.write(f"# config {cfg.digest}\nmeasure,setting,value\n")
    fh.writelines(f"{a},{b},{v!r}\n" for a, b, v in rows)
print("wrote trends.csv")
