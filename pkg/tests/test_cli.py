import json

import pytest

from scenegat.checkpoint import load_checkpoint
from scenegat.cli import build_parser, main
from scenegat.explain import parse_rendered_table

TINY = {"hidden_dim": 16, "object_embed_dim": 12, "relation_embed_dim": 6, "num_heads": 2}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "spec.json").write_text(json.dumps({"counts": {"train": 120, "val": 40, "test": 40}, "seed": 2,
                                             "separation": 1.0}))
    (d / "train.json").write_text(json.dumps({"max_epochs": 12, "patience": 4, "learning_rate": 0.003}))
    (d / "model.json").write_text(json.dumps(TINY))
    assert main(["gen", "--spec", str(d / "spec.json"), "--out", str(d / "data")]) == 0
    assert main(_train_args(d, d / "m.ckpt")) == 0
    return d


def _train_args(d, out, *extra):
    return ["train", "--data", str(d / "data/dataset.jsonl"), "--splits", str(d / "data/splits.json"),
            "--config", str(d / "train.json"), "--model-config", str(d / "model.json"), "--out", str(out), *extra]


def test_help_documents_every_flag():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
    assert set(sub.choices) == {"gen", "train", "eval", "crossval", "explain", "predict", "inspect"}
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            for flag in action.option_strings:
                assert flag in text, (name, flag)
            if action.option_strings and action.dest != "help":
                assert action.help, (name, action.dest)


def test_usage_errors(workspace, capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--bogus"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 1
    assert main(_train_args(workspace, workspace / "x.ckpt", "--finetune", "head")) == 1
    assert "requires --init" in capsys.readouterr().err


def test_effective_config_printed(workspace, capsys):
    main(["inspect", "--graph", str(workspace / "data/dataset.jsonl")])
    assert capsys.readouterr().err.startswith("effective config: ")


def test_gen(workspace, tmp_path, capsys):
    assert main(["gen", "--spec", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 2
    assert "data error" in capsys.readouterr().err
    spec = str(workspace / "spec.json")
    main(["gen", "--spec", spec, "--out", str(tmp_path / "a"), "--seed", "5"])
    main(["gen", "--spec", spec, "--out", str(tmp_path / "b"), "--seed", "5"])
    for f in ("dataset.jsonl", "splits.json", "classes.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_train_outputs(workspace, capsys):
    out = workspace / "again.ckpt"
    assert main(_train_args(workspace, out)) == 0
    text = capsys.readouterr().out
    assert "val balanced accuracy" in text
    assert out.read_bytes() == (workspace / "m.ckpt").read_bytes()
    hist = json.loads((workspace / "again.ckpt.history.json").read_text())
    assert all("seconds" in h for h in hist["history"])
    ck = load_checkpoint(out)
    best = next(h for h in ck.history if h["epoch"] == ck.best_epoch)
    assert best["val_balanced_accuracy"] >= 0.95


def test_finetune_head_freezes(workspace):
    out = workspace / "head.ckpt"
    assert main(_train_args(workspace, out, "--init", str(workspace / "m.ckpt"), "--finetune", "head")) == 0
    a, b = load_checkpoint(workspace / "m.ckpt"), load_checkpoint(out)
    for name in a.params:
        if not name.startswith("head."):
            assert a.params[name].tobytes() == b.params[name].tobytes(), name


def test_eval_report(workspace, capsys):
    args = ["eval", "--data", str(workspace / "data/dataset.jsonl"), "--splits", str(workspace / "data/splits.json"),
            "--ckpt", str(workspace / "m.ckpt")]
    assert main(args + ["--report", str(workspace / "r1.json")]) == 0
    assert main(args + ["--report", str(workspace / "r2.json")]) == 0
    assert (workspace / "r1.json").read_bytes() == (workspace / "r2.json").read_bytes()
    rep = json.loads((workspace / "r1.json").read_text())
    for key in ("balanced_accuracy", "per_class_recall", "confusion_counts", "confusion_row_normalized",
                "per_subset", "counts"):
        assert key in rep
    assert "balanced accuracy" in capsys.readouterr().out


def test_eval_subset_table(workspace, tmp_path):
    rows = [json.loads(line) for line in (workspace / "data/dataset.jsonl").read_text().splitlines()]
    for i, r in enumerate(rows):
        r["subset"] = "person" if i % 2 else "object"
    data = tmp_path / "tagged.jsonl"
    data.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    (tmp_path / "classes.txt").write_text((workspace / "data/classes.txt").read_text())
    assert main(["eval", "--data", str(data), "--ckpt", str(workspace / "m.ckpt"),
                 "--report", str(tmp_path / "r.json")]) == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert set(rep["per_subset"]) == {"person", "object", "global"}


def test_crossval(workspace, tmp_path, capsys):
    out = tmp_path / "cv.json"
    assert main(["crossval", "--data", str(workspace / "data/dataset.jsonl"), "--k", "3", "--config",
                 str(workspace / "train.json"), "--model-config", str(workspace / "model.json"),
                 "--max-epochs", "3", "--out", str(out)]) == 0
    res = json.loads(out.read_text())
    vals = [f["balanced_accuracy"] for f in res["folds"]]
    assert len(vals) == 3
    mean = sum(vals) / 3
    assert res["balanced_accuracy_mean"] == pytest.approx(mean, abs=1e-12)
    assert res["balanced_accuracy_std"] == pytest.approx((sum((v - mean) ** 2 for v in vals) / 3) ** 0.5, abs=1e-12)
    assert main(["crossval", "--data", str(workspace / "data/dataset.jsonl"), "--k", "500"]) == 2
    assert "stratification" in capsys.readouterr().err


def test_explain(workspace, capsys):
    out = workspace / "tables.json"
    assert main(["explain", "--data", str(workspace / "data/dataset.jsonl"), "--splits",
                 str(workspace / "data/splits.json"), "--ckpt", str(workspace / "m.ckpt"), "--top-objects", "3",
                 "--top-relations", "2", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    payload = json.loads(out.read_text())
    parsed = parse_rendered_table(text)
    assert len(payload) == 8
    for row in payload:
        assert len(row["objects"]) <= 3 and len(row["relations"]) <= 2
        assert parsed[row["class"]] == ([o["label"] for o in row["objects"]], [r["label"] for r in row["relations"]])
        assert all(set(o) == {"label", "score", "support"} for o in row["objects"])


def test_predict(workspace, tmp_path, capsys):
    line = (workspace / "data/dataset.jsonl").read_text().splitlines()[0]
    g = tmp_path / "g.json"
    g.write_text(line)
    capsys.readouterr()
    assert main(["predict", "--graph", str(g), "--ckpt", str(workspace / "m.ckpt")]) == 0
    first = capsys.readouterr().out.splitlines()[0]
    gid, cls, conf = first.split("\t")
    assert gid == json.loads(line)["graph_id"] and 0 < float(conf) <= 1
    assert main(["predict", "--graph", str(g), "--ckpt", str(workspace / "m.ckpt"), "--json"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["predicted"] == cls and 0 < d["confidence"] <= 1
    assert d["confidence"] == max(d["probabilities"].values())
    bad = tmp_path / "bad.json"
    bad.write_text('{"graph_id": "x", "width": 5, "height": 5, "objects": []}')
    assert main(["predict", "--graph", str(bad), "--ckpt", str(workspace / "m.ckpt")]) == 2


def test_inspect(tmp_path, capsys):
    rec = {"graph_id": "q", "label": None, "width": 10, "height": 10,
           "objects": [{"id": 0, "label": "gizmo", "bbox": [0, 0, 5, 5]}, {"id": 1, "label": "bed", "bbox": [1, 1, 2, 2]}],
           "relations": [{"subj": 0, "pred": "teleports", "obj": 1}, {"subj": 1, "pred": "on", "obj": 0}]}
    p = tmp_path / "q.json"
    p.write_text(json.dumps(rec))
    assert main(["inspect", "--graph", str(p)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("q: 2 nodes, 2 edges")
    assert lines[1].startswith("([unk_obj]#0, [unk_rel], bed#1)")
    assert lines[2].startswith("(bed#1, on, [unk_obj]#0)")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_code(workspace, tmp_path, capsys):
    cfg = tmp_path / "hot.json"
    cfg.write_text(json.dumps({"max_epochs": 2, "patience": 1, "learning_rate": 1e300}))
    args = _train_args(workspace, tmp_path / "n.ckpt")
    args[args.index("--config") + 1] = str(cfg)
    assert main(args) == 3
    assert "numeric" in capsys.readouterr().err
    assert not (tmp_path / "n.ckpt").exists()
