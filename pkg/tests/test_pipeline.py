import json

import numpy as np
import pytest

from conftest import chat_reply
from latentlens import cli, pipeline
from latentlens import tinyvae as tv
from latentlens.errors import DegenerateLabels, IncompleteRun, NoOverlap
from latentlens.similarity import SENTINEL


def tiny_config(**overrides):
    d = {
        "dataset": {"kind": "shapes", "count": 64, "side": 16},
        "training": {"epochs": 3, "hidden_sizes": [16], "batch_size": 16, "learning_rate": 3e-3},
        "seed": 2,
    }
    d.update(overrides)
    return pipeline.RunConfig.from_dict(d)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    paths = pipeline.cmd_train(tiny_config(), out)
    return out, paths


def copy_params(trained, dest, variant="beta_tcvae"):
    src = trained[1][variant]
    (dest / "params").mkdir(parents=True, exist_ok=True)
    (dest / "params" / src.name).write_bytes(src.read_bytes())


# --- config --------------------------------------------------------------------

def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        pipeline.RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        pipeline.RunConfig(epsilon="calibrate")
    with pytest.raises(ValueError):
        pipeline.RunConfig(epsilon=0.5, calibration_file="c.json")
    with pytest.raises(ValueError):
        pipeline.DatasetSource(kind="shapes", images="x.idx")
    (tmp_path / "cal.json").write_text(json.dumps({"cosine_embedding": {"epsilon": 0.61}}))
    cfg = pipeline.RunConfig(epsilon="calibrate", calibration_file=str(tmp_path / "cal.json"))
    assert cfg.resolve_epsilon() == 0.61
    assert pipeline.RunConfig().resolve_epsilon() == 0.7434


def test_config_round_trip(tmp_path):
    cfg = tiny_config()
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert pipeline.RunConfig.load(path).to_dict() == cfg.to_dict()


# --- train -----------------------------------------------------------------------

def test_train_outputs(trained, tmp_path):
    out, paths = trained
    assert sorted(paths) == ["beta_tcvae", "beta_vae", "vae"]
    for variant, path in paths.items():
        params = tv.load_params(path.read_bytes())
        assert params.latent_dim == 6 and params.input_dim == 256
        rows = (out / "params" / f"{variant}_history.csv").read_text().splitlines()
        assert len(rows) == 4
        losses = [float(r.split(",")[1]) for r in rows[1:]]
        assert losses[-1] < losses[0]
    again = pipeline.cmd_train(tiny_config(), tmp_path)
    for variant in paths:
        assert again[variant].read_bytes() == paths[variant].read_bytes()


# --- explain / report --------------------------------------------------------------

def test_heuristic_explain_offline(trained, tmp_path):
    copy_params(trained, tmp_path)
    records = pipeline.cmd_explain(tiny_config(), tmp_path)
    assert len(records) == 6
    assert len(list((tmp_path / "strips").glob("*.png"))) == 6
    assert len(list((tmp_path / "responses").glob("*.jsonl"))) == 6
    assert len(pipeline.read_jsonl(tmp_path / "selections.jsonl")) == 6
    for rec in records:
        assert rec["status"] == "ok"
        assert (rec["displayed"] == SENTINEL) == (rec["certainty"] < rec["epsilon"])
    text = pipeline.cmd_report(tmp_path)
    assert text.count("\n## ") == 6
    assert "**z1**" in text and "**z6**" in text
    assert (tmp_path / "report.md").read_bytes() == text.encode()
    pipeline.cmd_report(tmp_path)
    assert (tmp_path / "report.md").read_text() == text


def write_scenarios(path):
    on = ["The latent variable controls the horizontal position of the shape."]
    off = ["Maybe brightness changes slightly.", "It could be the rotation of the outline.",
           "Nothing obvious varies here.", "Perhaps the size of the digit changes."]
    path.write_text(json.dumps([
        {"scenario_id": "clear", "on_topic_pool": on, "off_topic_pool": off, "noise_p": 0.0},
        {"scenario_id": "unclear", "on_topic_pool": on, "off_topic_pool": off, "noise_p": 1.0},
    ]))


def test_scripted_clear_and_unclear(trained, tmp_path):
    copy_params(trained, tmp_path)
    write_scenarios(tmp_path / "sc.json")
    cfg = tiny_config(explainer={"backend": "scripted", "samples_n": 5},
                      scenarios=str(tmp_path / "sc.json"),
                      scenario_map={str(d): ("clear" if d % 2 == 0 else "unclear") for d in range(6)})
    records = pipeline.cmd_explain(cfg, tmp_path)
    for rec in records:
        if rec["dim_index"] % 2 == 0:
            assert rec["displayed"] == "The latent variable controls the horizontal position of the shape."
        else:
            assert rec["displayed"] == SENTINEL
    report = pipeline.cmd_report(tmp_path)
    section = report.split("**z2**")[1].split("\n## ")[0]
    assert SENTINEL in section


def test_backend_failure_recorded(trained, tmp_path, stub_server, api_key):
    copy_params(trained, tmp_path)
    stub_server.replies = [(200, chat_reply("the shape moves right"))] * 2
    stub_server.default = (400, {"error": "bad request"})
    cfg = tiny_config(explainer={"backend": "remote", "endpoint": stub_server.url, "samples_n": 2,
                                 "max_retries": 0, "max_in_flight": 1})
    records = pipeline.cmd_explain(cfg, tmp_path)
    assert len(records) == 6
    assert records[0]["status"] == "ok"
    assert all(r["status"] == "error" and r["error"] == "HttpError" for r in records[1:])
    failures = json.loads((tmp_path / "failures.json").read_text())
    assert len(failures) == 5
    assert "Backend error: HttpError" in pipeline.cmd_report(tmp_path)


def test_report_requires_bundle(tmp_path):
    with pytest.raises(IncompleteRun):
        pipeline.cmd_report(tmp_path)
    with pytest.raises(IncompleteRun):
        pipeline.cmd_explain(tiny_config(), tmp_path)


def test_select_reapplies_threshold(trained, tmp_path):
    copy_params(trained, tmp_path)
    pipeline.cmd_explain(tiny_config(), tmp_path)
    shown = pipeline.cmd_select(tiny_config(), tmp_path, epsilon=1.01)
    assert all(r["displayed"] == SENTINEL for r in shown)
    shown = pipeline.cmd_select(tiny_config(), tmp_path, epsilon=0.0)
    assert all(r["displayed"] == r["selected"] for r in shown)
    expl = pipeline.read_jsonl(tmp_path / "explanations.jsonl")
    assert all(e["displayed"] != SENTINEL for e in expl)


# --- calibrate / evaluate --------------------------------------------------------------

def write_scores(path, rows):
    pipeline.write_jsonl(path, [{"sequence_id": sid, "similarity_kind": kind, "certainty": c,
                                 "status": "ok"} for sid, kind, c in rows])


def test_calibrate_orders_estimates(tmp_path):
    labels = [1, 1, 1, 0, 0, 0]
    cosine = [0.9, 0.85, 0.8, 0.3, 0.2, 0.1]
    lexical = [0.9, 0.2, 0.8, 0.85, 0.3, 0.1]
    ids = [f"s{i}" for i in range(6)]
    pipeline.write_jsonl(tmp_path / "ann.jsonl", [{"sequence_id": s, "label": y} for s, y in zip(ids, labels)])
    write_scores(tmp_path / "scores.jsonl",
                 [(s, "cosine_embedding", c) for s, c in zip(ids, cosine)]
                 + [(s, "lexical_rougeL", c) for s, c in zip(ids, lexical)])
    results = pipeline.cmd_calibrate(tmp_path / "ann.jsonl", tmp_path / "scores.jsonl", tmp_path)
    assert results["cosine_embedding"].auc > results["lexical_rougeL"].auc
    lines = (tmp_path / "calibration.csv").read_text().splitlines()
    assert lines[0] == "Uncertainty Estimate,AUC,F1-score,Precision,Recall"
    assert lines[1].startswith("lexical similarity,") and lines[2].startswith("cosine similarity,1.0000")


def test_calibrate_rejections(tmp_path):
    pipeline.write_jsonl(tmp_path / "ann.jsonl", [{"sequence_id": "a", "label": 1},
                                                 {"sequence_id": "b", "label": 1}])
    write_scores(tmp_path / "s.jsonl", [("a", "cosine_embedding", 0.5), ("b", "cosine_embedding", 0.6)])
    with pytest.raises(DegenerateLabels):
        pipeline.cmd_calibrate(tmp_path / "ann.jsonl", tmp_path / "s.jsonl")
    write_scores(tmp_path / "t.jsonl", [("x", "cosine_embedding", 0.5)])
    with pytest.raises(NoOverlap):
        pipeline.cmd_calibrate(tmp_path / "ann.jsonl", tmp_path / "t.jsonl")


def test_evaluate_perfect_and_shape(tmp_path):
    recs = []
    for backend in ("heuristic", "scripted"):
        for i, text in enumerate(["the shape moves left to right", "the object grows larger"]):
            recs.append({"sequence_id": f"s{i}", "dataset": "dsprites2d", "vae_variant": "vae",
                         "backend": backend, "explanation": text})
    pipeline.write_jsonl(tmp_path / "expl.jsonl", recs)
    pipeline.write_jsonl(tmp_path / "ann.jsonl", [
        {"sequence_id": "s0", "label": 1, "references": ["the shape moves left to right", "x moves"]},
        {"sequence_id": "s1", "label": 1, "references": ["the object grows larger"]},
    ])
    rows = pipeline.cmd_evaluate(tmp_path / "expl.jsonl", tmp_path / "ann.jsonl", tmp_path)
    assert len(rows) == 2
    assert all(r["bleu"] == 1.0 and r["rouge_l"] == 1.0 for r in rows)
    csv_lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert len(csv_lines) == 3 and csv_lines[1].startswith("dsprites2d,vae,heuristic,1.000000,1.000000")


# --- CLI -------------------------------------------------------------------------------

def test_cli_end_to_end(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "dataset": {"kind": "shapes", "count": 32, "side": 16},
        "training": {"epochs": 1, "hidden_sizes": [8], "batch_size": 16,
                     "variants": {"beta_vae": {"beta": 2.0}}},
    }))
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg), "--out", str(out), "--seed", "4"]) == 0
    assert [p.name for p in (out / "params").glob("*.tvae")] == ["beta_vae.tvae"]
    assert cli.main(["traverse", "--config", str(cfg), "--out", str(out), "--seed", "4"]) == 0
    assert len(list((out / "strips").glob("*.png"))) == 6
    assert cli.main(["explain", "--config", str(cfg), "--out", str(out), "--seed", "4"]) == 0
    assert cli.main(["report", "--out", str(out)]) == 0
    assert (out / "report.md").exists()
    assert cli.main(["report", "--out", str(tmp_path / "missing")]) == 1
    assert "IncompleteRun" in capsys.readouterr().err
