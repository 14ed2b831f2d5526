import json

import pytest

from latentrag.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from latentrag.evaluation import max_length_ratio
from latentrag.records import read_jsonl, read_tsv
from latentrag.retrieval import CorpusIndex

TINY = ["n_persons=40", "n_cities=20", "n_test_cities=6", "n_train=170", "n_test=30", "enc_epochs=2",
        "epochs=1", "d_model=16", "d_ff=32", "n_layers=1", "n_heads=2", "max_context=160", "seq_cap=160",
        "m=2", "n=4", "decode_max_tokens=6"]


def run(args, wd, extra=()):
    argv = list(args) + ["-q", "--workdir", str(wd)]
    for kv in list(TINY) + list(extra):
        argv += ["--set", kv]
    return main(argv)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    wd = tmp_path_factory.mktemp("run")
    assert run(["gen-data"], wd) == EXIT_OK
    assert run(["train"], wd) == EXIT_OK
    return wd


def test_gen_data_files_and_byte_identical_rerun(workdir, tmp_path):
    names = ["corpus.jsonl", "train_qa.jsonl", "test_qa.jsonl", "vocab.json", "encoder.ckpt", "index.bin",
             "teacher_train.jsonl", "teacher_test.jsonl"]
    assert run(["gen-data"], tmp_path) == EXIT_OK
    for n in names:
        assert (workdir / n).read_bytes() == (tmp_path / n).read_bytes(), n
    meta, recs = read_jsonl(workdir / "test_qa.jsonl")
    assert meta["config_hash"] and all({"qid", "question", "answers", "hops"} <= set(r) for r in recs)
    assert CorpusIndex.load(workdir / "index.bin").embeddings.shape[0] == 160


def test_gen_data_hops_two(tmp_path):
    extra = ["n_persons=80", "n_train=150", "n_test=50"]
    assert main(["gen-data", "--hops", "2", "-q", "--workdir", str(tmp_path)]
                + [a for kv in TINY + extra for a in ("--set", kv)]) == EXIT_OK
    _, recs = read_jsonl(tmp_path / "train_qa.jsonl")
    assert {r["hops"] for r in recs} == {2}


def test_train_outputs_and_reproducible_hash(workdir, tmp_path, capsys):
    log = (workdir / "train" / "loss_log.tsv").read_text()
    assert "# arm=kl" in log
    for n in ("corpus.jsonl", "train_qa.jsonl", "test_qa.jsonl", "vocab.json", "encoder.ckpt", "index.bin",
              "teacher_train.jsonl", "teacher_test.jsonl", "world.json"):
        (tmp_path / n).write_bytes((workdir / n).read_bytes())
    capsys.readouterr()
    assert run(["train"], tmp_path) == EXIT_OK
    assert (tmp_path / "train" / "final.ckpt").read_bytes() == (workdir / "train" / "final.ckpt").read_bytes()


def test_eval_reports(workdir):
    assert run(["eval"], workdir) == EXIT_OK
    _, header, rows = read_tsv(workdir / "eval" / "latency.tsv")
    assert not any(r[1] == "latent-decode" for r in rows)
    for method in {r[0] for r in rows}:
        pct = sum(float(r[3]) for r in rows if r[0] == method and r[1] != "total")
        assert abs(pct - 100.0) < 0.1
    assert run(["eval", "--decode"], workdir) == EXIT_OK
    _, _, rows = read_tsv(workdir / "eval" / "latency.tsv")
    assert any(r[1] == "latent-decode" for r in rows)
    _, trajs = read_jsonl(workdir / "eval" / "trajectories.jsonl")
    _, _, metrics = read_tsv(workdir / "eval" / "report.tsv")
    total = [float(r[2]) for r in metrics if r[0] == "kl+decode" and r[1] == "passes.total"][0]
    oracle = []
    for t in trajs[:20]:
        steps = sum(s["action"] == "<query>" for s in t["steps"])
        oracle.append(2 * steps + 1 + t["answer_tokens"] + max(t["decoded_lengths"]))
        assert len([e for e in t["ledger"] if e["kind"] != "index-query"]) == oracle[-1]
        assert "duration" not in t["ledger"][0]
    full = [2 * sum(s["action"] == "<query>" for s in t["steps"]) + 1 + t["answer_tokens"]
            + max(t["decoded_lengths"]) for t in trajs]
    assert total == pytest.approx(sum(full) / len(full))


def test_analyze(workdir):
    assert run(["analyze", "index"], workdir) == EXIT_OK
    rep = json.loads((workdir / "analysis" / "anisotropy.json").read_text())
    assert set(rep) == {"cosine", "angle_deg"}
    assert run(["analyze", "trajectories", "--limit", "4", "--top", "3"], workdir) == EXIT_OK
    _, header, rows = read_tsv(workdir / "analysis" / "logit_lens.tsv")
    assert header[4:] == ["top1", "top2", "top3"] and all(len(r) == 7 for r in rows)
    _, _, stats = read_tsv(workdir / "analysis" / "max_length_ratio.tsv")
    assert {r[0] for r in stats} == {"count", "max", "mean", "median", "min"}


def test_sweep_tokens_grid(workdir):
    assert run(["sweep-tokens", "--m-list", "2,4", "--n-list", "4,16"], workdir, ["epochs=1"]) == EXIT_OK
    _, header, rows = read_tsv(workdir / "sweep_tokens.tsv")
    assert header == ["m\\n", "4", "16"] and [r[0] for r in rows] == ["2", "4"]
    first = rows[1][2]
    assert run(["sweep-tokens", "--m-list", "4", "--n-list", "16"], workdir) == EXIT_OK
    _, _, again = read_tsv(workdir / "sweep_tokens.tsv")
    assert again[0][1] == first


def test_report_flags_and_file(workdir):
    assert run(["report", "--arms", "kl,cosine"], workdir) == EXIT_OK
    text = (workdir / "ablation.tsv").read_text()
    assert "# ordering=" in text


def test_exit_codes(tmp_path, workdir):
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["train", "--set", "arm=nope", "--workdir", str(tmp_path)]) == EXIT_USAGE
    assert main(["train", "-q", "--workdir", str(tmp_path / "missing")]) == EXIT_DATA
    (tmp_path / "bad").mkdir()
    for n in ("vocab.json", "encoder.ckpt", "teacher_train.jsonl", "teacher_test.jsonl", "train_qa.jsonl",
              "test_qa.jsonl"):
        (tmp_path / "bad" / n).write_bytes((workdir / n).read_bytes())
    (tmp_path / "bad" / "index.bin").write_bytes(b"garbage")
    assert run(["eval"], tmp_path / "bad") == EXIT_DATA
