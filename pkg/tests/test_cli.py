import re
from pathlib import Path

import pytest

from asdspoof.cli import git_blob_hash, main
from asdspoof.config import dump_config, load_config
from asdspoof.metrics import ScoreRecord, read_scores, write_scores


def test_evaluate_separated_fixture(tmp_path, capsys):
    p = tmp_path / "scores.txt"
    write_scores(p, [ScoreRecord("b1", "bonafide", 0.9), ScoreRecord("b2", "bonafide", 0.8),
                     ScoreRecord("s1", "spoof", 0.1), ScoreRecord("s2", "spoof", 0.2)])
    assert main(["evaluate", "--scores", str(p)]) == 0
    assert "EER: 0.00%" in capsys.readouterr().out


def test_info_reports_ratios(capsys):
    assert main(["info"]) == 0
    out = capsys.readouterr().out
    params = float(re.search(r"params ratio: ([\d.]+)", out).group(1))
    macs = float(re.search(r"MACs ratio: ([\d.]+)", out).group(1))
    assert 0.20 <= params <= 0.28 and 0.0 < macs < 0.3


@pytest.mark.parametrize("argv", [["nosuch"], ["evaluate", "--bogus", "x"], ["evaluate"], []])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    assert "usage:" in capsys.readouterr().err


def test_stage_order_violation_exit_1(tmp_path, capsys):
    ini = tmp_path / "c.ini"
    ini.write_text(f"[run]\nworkdir = {tmp_path / 'run'}\n")
    assert main(["distill", "--config", str(ini)]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and "finetune" in err[0] and err[0].startswith("asdspoof distill: error:")


def test_bad_score_file_exit_1(tmp_path, capsys):
    p = tmp_path / "s.txt"
    p.write_text("u1 bonafide notanumber\n")
    assert main(["evaluate", "--scores", str(p)]) == 1
    assert "line 1" in capsys.readouterr().err


def test_git_blob_hash(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"hello\n")
    assert git_blob_hash(p) == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_tiny_pipeline_end_to_end(tmp_path, capsys):
    corpus = tmp_path / "corpus"
    assert main(["synth", "--out", str(corpus), "--speakers", "2", "--clips", "5",
                 "--duration", "0.5"]) == 0
    cfg = load_config(corpus / "toy.ini")
    cfg = cfg.replace("pretrain", epochs=1)
    cfg = cfg.replace("finetune", epochs=1)
    cfg = cfg.replace("distill", epochs=1)
    cfg = cfg.replace("data", segment_s=0.5)
    ini = tmp_path / "tiny.ini"
    ini.write_text(dump_config(cfg))

    def run(*argv):
        rc = main(list(argv) + ["--config", str(ini)])
        assert rc == 0, capsys.readouterr().err

    # finetune before pretrain is a stage-order violation
    assert main(["finetune", "--config", str(ini)]) == 1
    run("pretrain")
    run("finetune", "--aeg", "static", "--sidecar", str(tmp_path / "adv"))
    run("distill")
    run("score", "--model", "student", "--out", str(tmp_path / "student.txt"))
    run("score", "--model", "teacher", "--out", str(tmp_path / "teacher.txt"))
    run("attack", "--model", "pretrain", "--limit", "2", "--out", str(tmp_path / "attack"))
    capsys.readouterr()
    run("evaluate", "--scores", str(tmp_path / "student.txt"))
    out = capsys.readouterr().out
    assert re.search(r"EER: \d+\.\d\d%", out) and "min t-DCF" in out

    recs = read_scores(tmp_path / "student.txt")
    assert recs and not any(r.utt_id.startswith("ADV") for r in recs)
    assert (tmp_path / "adv" / "manifest.tsv").is_file()
    assert len((tmp_path / "attack" / "manifest.tsv").read_text().splitlines()) >= 1
    log = (Path(cfg.run.workdir) / cfg.run.log_file).read_text()
    assert log.count("# config sha256=") >= 6
    assert "blob=" in log and "stage=distill" in log
    # distilling from a pretrain checkpoint is rejected
    assert main(["distill", "--config", str(ini), "--teacher",
                 str(tmp_path / "corpus" / "run" / "pretrain.npz")]) == 1
