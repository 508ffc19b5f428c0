import json

import pytest

from sparql_lm.cli import main


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


def test_pipeline(workdir, capsys):
    d = workdir
    code, out, _ = run(capsys, "make-fixtures", "--templates", 4, "--out", d / "fx", "--seed", 3)
    assert code == 0 and json.loads(out)["queries"] == 80
    assert run(capsys, "train-tokenizer", "--corpus", d / "fx/pretrain.txt", "--vocab-size", 200,
               "--min-freq", 1, "--out", d / "q.vocab")[0] == 0
    assert run(capsys, "train-tokenizer", "--corpus", d / "fx/train.en", d / "fx/valid.en", d / "fx/test.en",
               "--vocab-size", 200, "--min-freq", 1, "--out", d / "nl.vocab")[0] == 0
    code, out, _ = run(capsys, "pretrain", "--corpus", d / "fx/pretrain.txt", "--vocab", d / "q.vocab",
                       "--objectives", "mlm+wso", "--steps", 4, "--batch-size", 4, "--max-len", 48,
                       "--checkpoint-every", 2, "--out", d / "pt", "--seed", 1)
    assert code == 0 and json.loads(out)["steps"] == 4
    rows = (d / "pt/metrics.jsonl").read_text().splitlines()
    assert len(rows) == 4 and set(json.loads(rows[0])) == {"step", "loss", "lr", "tokens_per_second"}
    code, out, _ = run(capsys, "finetune", "--pairs", d / "fx/train", "--valid", d / "fx/valid",
                       "--src-vocab", d / "nl.vocab", "--tgt-vocab", d / "q.vocab", "--decoder", d / "pt/final.ckpt",
                       "--epochs", 1, "--src-max", 32, "--tgt-max", 48, "--out", d / "ft", "--seed", 1)
    assert code == 0
    manifest = json.loads((d / "ft/warm_start.json").read_text())
    assert manifest["copied"] and manifest["randomized"]
    code, out, _ = run(capsys, "generate", "--model", d / "ft/model.ckpt", "--input", d / "fx/test.en",
                       "--beam", 2, "--max-len", 8, "--out", d / "gen.txt")
    assert code == 0
    n_in = len((d / "fx/test.en").read_text().splitlines())
    assert len((d / "gen.txt").read_text().splitlines()) == n_in
    code, out, _ = run(capsys, "evaluate", "--candidates", d / "fx/test.sparql", "--references",
                       d / "fx/test.sparql", "--report", d / "r.json")
    assert code == 0
    rep = json.loads((d / "r.json").read_text())
    assert rep["bleu"] == 100.0 and rep["exact_match"] == 1.0


def test_prepare_corpus(workdir, capsys):
    log = workdir / "log.txt"
    log.write_text(
        "PREFIX dbo: <http://dbpedia.org/ontology/> SELECT ?x WHERE { ?x dbo:team ?y }\n"
        "SELECT ?x WHERE { ?x <http://dbpedia.org/ontology/team> ?y }\n"
        "SELECT WHERE {\n"
    )
    code, out, _ = run(capsys, "prepare-corpus", "--input", log, "--out", workdir / "enc.txt")
    assert code == 0 and json.loads(out) == {"accepted": 2, "rejected": 1, "unique": 1}
    assert (workdir / "enc.txt").read_text().strip() == (
        "select var_x where brack_open var_x <dbo_team> var_y brack_close")


def test_exit_codes(workdir, capsys):
    assert run(capsys, "pretrain", "--corpus", workdir / "missing", "--vocab", "nope", "--out", workdir / "x")[0] == 2
    a, b = workdir / "a.txt", workdir / "b.txt"
    a.write_text("x\n")
    b.write_text("x\ny\n")
    assert run(capsys, "evaluate", "--candidates", a, "--references", b)[0] == 2
    bad = workdir / "bad.ini"
    bad.write_text("[model]\nwhatever = 3\n")
    assert run(capsys, "make-fixtures", "--config", bad, "--out", workdir / "f2")[0] == 2
    with pytest.raises(SystemExit) as e:
        main(["pretrain"])
    assert e.value.code == 2


def test_runtime_failure_exit_one(workdir, capsys, monkeypatch):
    import sparql_lm.data as data

    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(data, "make_fixture_corpus", boom)
    code, _, err = run(capsys, "make-fixtures", "--out", workdir / "f3")
    assert code == 1 and "disk on fire" in err
