"""The command-line pipeline end to end, from one Python script.

Writes a config, then drives `dmtrl train`, `dmtrl eval` and
`dmtrl measure` exactly as a shell user would, and prints the artifacts.
Equivalent shell session:

    dmtrl train   --config cfg.json --out runs/
    dmtrl eval    --checkpoint runs/dmtrl-tt_f1_r0.ckpt --data data.json --out results.csv
    dmtrl measure --checkpoint runs/dmtrl-tt_f1_r0.ckpt --out sharing.json
"""
import json
import pathlib
import tempfile

from dmtrl.cli import main

work = pathlib.Path(tempfile.mkdtemp(prefix="dmtrl_demo_"))
config = {
    "name": "cli-demo",
    "tasks": 10,
    "input_shape": [28, 28, 1],
    "architecture": [
        {"kind": "conv", "h": 5, "w": 5, "in_ch": 1, "out_ch": 4},
        {"kind": "relu"},
        {"kind": "maxpool"},
        {"kind": "fc", "d_in": 576, "d_out": 1},
    ],
    "sharing": "dmtrl-tt",
    "init": {"policy": "stl", "pretrain_epochs": 4, "epsilon": 0.1},
    "train": {"epochs": 4, "batch_size": 64, "seed": 0, "lr": 0.002},
    "data": {"source": "synthetic_digits", "n_train": 400, "n_test": 300,
             "noise": 0.2, "jitter": 2},
}
cfg_path = work / "cfg.json"
cfg_path.write_text(json.dumps(config, indent=2))
data_path = work / "data.json"
data_path.write_text(json.dumps(config["data"]))

print("train ->", main(["train", "--config", str(cfg_path), "--out", str(work / "runs")]))
ckpt = work / "runs" / "dmtrl-tt_f1_r0.ckpt"

print("eval  ->", main(["eval", "--checkpoint", str(ckpt),
                        "--data", str(data_path), "--out", str(work / "results.csv")]))
print("measure ->", main(["measure", "--checkpoint", str(ckpt),
                          "--out", str(work / "sharing.json")]))

print("\nresults.csv:")
print((work / "results.csv").read_text())
report = json.loads((work / "sharing.json").read_text())
for row in report["layers"]:
    print(f"layer {row['layer']}: K={row['k']} rho={row['rho']:.3f} "
          f"top pair {row['top_pair']['tasks']}")
print("\nartifacts under", work)
