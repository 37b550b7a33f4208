import json

import pytest

from normq.cli import main
from normq.model_io import load_model, load_quantized, read_csv
from normq.training import EmRunRecord


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--hidden-size", "6", "--vocab-size", "12", "--sequences", "240",
                 "--length", "8", "--seed", "3", "--out", str(out)]) == 0
    return out


def run(*args):
    return main([str(a) for a in args])


class TestTrain:
    def test_hundred_steps_events_every_twenty(self, synth, tmp_path):
        assert run("train", "--corpus", synth / "corpus.txt", "--vocab-size", 12, "--hidden-size", 4,
                   "--epochs", 5, "--chunks", 20, "--interval", 20, "--bits", 8, "--quantizer", "norm-q",
                   "--out", tmp_path) == 0
        rows = read_csv(tmp_path / "train.csv")
        assert list(rows[0]) == list(EmRunRecord.CSV_HEADER)
        assert len(rows) == 100
        assert [int(r["step"]) for r in rows if r["quantized"] == "1"] == [20, 40, 60, 80, 100]
        assert (tmp_path / "train.png").stat().st_size > 0
        load_quantized(tmp_path / "model.quant.nqhm")
        load_model(tmp_path / "model.nqhm")

    def test_byte_identical_rerun(self, synth, tmp_path):
        args = ["train", "--corpus", synth / "corpus.txt", "--hidden-size", 4, "--epochs", 2,
                "--chunks", 4, "--interval", 3, "--quantizer", "norm-q", "--bits", 4, "--seed", 5]
        assert run(*args, "--out", tmp_path / "a") == 0
        assert run(*args, "--out", tmp_path / "b") == 0
        for name in ("train.csv", "model.nqhm", "model.quant.nqhm"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_config_file_and_override(self, synth, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"mode": "train", "corpus": str(synth / "corpus.txt"), "hidden-size": 3,
                                   "epochs": 3, "chunks": 2, "out": str(tmp_path / "o")}))
        assert run("--config", cfg, "--epochs", 1) == 0
        assert len(read_csv(tmp_path / "o" / "train.csv")) == 2


@pytest.fixture(scope="module")
def trained(synth, tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    assert run("train", "--corpus", synth / "corpus.txt", "--hidden-size", 4, "--epochs", 3,
               "--out", out) == 0
    return out / "model.nqhm"


class TestQuantizeEval:
    def test_quantize_norm_q(self, trained, tmp_path):
        assert run("quantize", "--model", trained, "--scheme", "norm-q", "--bits", 8, "--out", tmp_path) == 0
        rows = read_csv(tmp_path / "compression.csv")
        assert [r["matrix"] for r in rows] == ["initial", "transition", "emission"]
        size = (tmp_path / "quantized.nqhm").stat().st_size
        total = sum(int(r["total"]) for r in rows)
        assert float(rows[0]["storage_style_rate"]) == pytest.approx(1 - 8 * size / (32 * total))

    @pytest.mark.parametrize("scheme", ["linear", "kmeans"])
    def test_quantize_other(self, trained, tmp_path, scheme):
        assert run("quantize", "--model", trained, "--scheme", scheme, "--bits", 3, "--out", tmp_path) == 0
        assert load_quantized(tmp_path / "quantized.nqhm").transition.bits == 3

    def test_prune(self, trained, tmp_path):
        assert run("--mode", "quantize", "--model", trained, "--scheme", "prune", "--ratio", 0.5,
                   "--out", tmp_path) == 0
        assert (tmp_path / "pruned.nqhm").exists() and (tmp_path / "pruned_norm.nqhm").exists()

    def test_eval(self, trained, synth, tmp_path):
        assert run("quantize", "--model", trained, "--bits", 4, "--out", tmp_path) == 0
        assert run("eval", "--model", trained, "--candidate", tmp_path / "quantized.nqhm", "--corpus",
                   synth / "corpus.txt", "--bits", "8,4,2", "--out", tmp_path) == 0
        cmp_rows = read_csv(tmp_path / "compare.csv")
        assert [r["label"] for r in cmp_rows] == ["reference", "candidate"]
        assert float(cmp_rows[0]["delta_lld"]) == 0.0
        sweep = read_csv(tmp_path / "sparsity.csv")
        assert [int(r["bits"]) for r in sweep] == [8] * 3 + [4] * 3 + [2] * 3
        assert (tmp_path / "sparsity.png").exists()

    def test_decode(self, trained, tmp_path):
        assert run("decode", "--model", trained, "--keyword", "3", "--trials", 40, "--max-len", 8,
                   "--out", tmp_path) == 0
        rows = read_csv(tmp_path / "decode.csv")
        assert [(r["label"], r["guided"]) for r in rows] == [("base", "0"), ("base", "1")]
        assert float(rows[1]["success_rate"]) >= float(rows[0]["success_rate"])


class TestSweep:
    def test_twelve_rows(self, synth, tmp_path):
        assert run("sweep", "--corpus", synth / "corpus.txt", "--hidden-size", 3, "--chunks", 4,
                   "--bits", "4,8", "--intervals", "1,2,5,20,50,100", "--out", tmp_path) == 0
        rows = read_csv(tmp_path / "sweep.csv")
        assert len(rows) == 12
        assert [(int(r["bits"]), int(r["interval"])) for r in rows][:3] == [(4, 1), (4, 2), (4, 5)]
        assert int(rows[0]["n_events"]) == 4 and int(rows[3]["n_events"]) == 1
        assert (tmp_path / "sweep.png").exists()


class TestUsage:
    @pytest.mark.parametrize("argv", [
        ["train", "--bogus"],
        ["nonsense"],
        [],
        ["train"],
        ["quantize", "--model", "/nonexistent/file"],
        ["train", "--mode", "eval"],
        ["sweep", "--bits", "4,x"],
    ])
    def test_usage_errors(self, argv, capsys):
        try:
            code = main(argv)
        except SystemExit as exc:  # argparse rejections
            code = exc.code
        assert code != 0

    def test_bad_corpus_nonzero(self, tmp_path):
        bad = tmp_path / "c.txt"
        bad.write_text("0 1\n0 q\n")
        assert run("train", "--corpus", bad, "--out", tmp_path) == 1
