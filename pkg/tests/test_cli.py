from __future__ import annotations

import json

import pytest

from vidistill.cli import build_parser, main
from vidistill.config import PipelineConfig, merge
from conftest import tiny_overrides


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(tiny_overrides(tmp_path / "out")))
    return path


def _write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


class TestParser:
    def test_verbs(self):
        parser = build_parser()
        for verb in ("gen-world", "gen-instructions", "adapt", "train-dual", "eval", "scaling", "pipeline"):
            assert parser.parse_args([verb]).verb == verb

    def test_caption_source_alias(self):
        args = build_parser().parse_args(["train-dual", "--caption-source", "alt-text"])
        assert args.source == "alt-text"

    def test_distill_needs_checkpoint(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["distill", "--manifest", "m.jsonl"])


class TestEvalTask:
    def test_qa(self, tmp_path, capsys):
        preds = _write_jsonl(tmp_path / "p.jsonl", [{"id": "a", "answer": "Red"}, {"id": "b", "answer": "dog"}])
        refs = _write_jsonl(tmp_path / "r.jsonl", [{"id": "a", "answer": "red"}, {"id": "b", "answer": "cat"}])
        assert main(["eval", "--task", "qa", "--predictions", str(preds), "--references", str(refs),
                     "--report", str(tmp_path / "rep")]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["metrics"]["exact_match"] == pytest.approx(0.5)
        assert (tmp_path / "rep.json").exists() and (tmp_path / "rep.csv").exists()

    def test_retrieval(self, tmp_path, capsys):
        preds = _write_jsonl(tmp_path / "p.jsonl", [{"query": 0, "scores": [0.9, 0.1]},
                                                     {"query": 1, "scores": [0.8, 0.2]}])
        refs = _write_jsonl(tmp_path / "r.jsonl", [{"query": 0, "target": 0}, {"query": 1, "target": 1}])
        assert main(["eval", "--task", "retrieval", "--predictions", str(preds), "--references", str(refs)]) == 0
        metrics = json.loads(capsys.readouterr().out)["metrics"]
        assert metrics["r_at_1"] == pytest.approx(0.5) and metrics["r_at_5"] == pytest.approx(1.0)

    def test_classify_needs_two_classes(self, tmp_path):
        preds = _write_jsonl(tmp_path / "p.jsonl", [{"id": "a", "scores": [1.0]}])
        refs = _write_jsonl(tmp_path / "r.jsonl", [{"id": "a", "label": 0}])
        assert main(["eval", "--task", "classify", "--predictions", str(preds), "--references", str(refs)]) == 2

    def test_caption(self, tmp_path, capsys):
        caps = {"a": "a red circle spins slowly", "b": "a blue square moves up quickly"}
        preds = _write_jsonl(tmp_path / "p.jsonl", [{"id": k, "caption": v} for k, v in caps.items()])
        refs = _write_jsonl(tmp_path / "r.jsonl", [{"id": k, "references": [v]} for k, v in caps.items()])
        assert main(["eval", "--task", "caption", "--predictions", str(preds), "--references", str(refs)]) == 0
        assert json.loads(capsys.readouterr().out)["metrics"]["cider"] == pytest.approx(10.0)

    def test_caption_single_id_is_an_error(self, tmp_path):
        preds = _write_jsonl(tmp_path / "p.jsonl", [{"id": "a", "caption": "a red circle"}])
        refs = _write_jsonl(tmp_path / "r.jsonl", [{"id": "a", "references": ["a red circle"]}])
        assert main(["eval", "--task", "caption", "--predictions", str(preds), "--references", str(refs)]) == 2

    def test_missing_files_flag(self):
        with pytest.raises(SystemExit):
            main(["eval", "--task", "qa"])


class TestRunVerbs:
    def test_pipeline_then_standalone_tools(self, config_file, tmp_path, capsys):
        assert main(["pipeline", "--config", str(config_file)]) == 0
        out = capsys.readouterr().out
        assert "r_at_1" in out
        root = tmp_path / "out" / "seed-0"
        world = root / "world"

        pseudo = tmp_path / "pseudo.jsonl"
        assert main(["distill", "--config", str(config_file), "--checkpoint", str(root / "adapt" / "final.vdck"),
                     "--manifest", str(world / "manifest.jsonl"), "--k", "2", "--output", str(pseudo)]) == 0
        rows = [json.loads(line) for line in pseudo.read_text().splitlines()]
        assert all(sum(c["source"] == "pseudo" for c in r["captions"]) == 2 for r in rows)

        save = tmp_path / "dual.vdck"
        assert main(["train-dual", "--config", str(config_file), "--manifest", str(pseudo),
                     "--frames-root", str(world), "--tokenizer", str(world / "tokenizer.json"),
                     "--save", str(save)]) == 0
        assert save.exists()
        assert json.loads(capsys.readouterr().out.splitlines()[-1])["source"] == "pseudo"

        stage = tmp_path / "s1.vdck"
        assert main(["adapt", "--config", str(config_file), "--stage", "1",
                     "--checkpoint", str(root / "adapt" / "base.vdck"), "--save", str(stage)]) == 0
        assert stage.exists()

    def test_seed_override_changes_run_directory(self, config_file, tmp_path):
        assert main(["gen-world", "--config", str(config_file), "--seed", "4"]) == 0
        assert (tmp_path / "out" / "seed-4" / "world" / "manifest.jsonl").exists()

    def test_bad_config_reports_error(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"world": {"n_clipz": 3}}))
        assert main(["gen-world", "--config", str(bad)]) == 2

    def test_config_file_matches_merge(self, config_file, tmp_path):
        from vidistill.config import load_config

        assert load_config(config_file) == merge(PipelineConfig(), tiny_overrides(tmp_path / "out"))
