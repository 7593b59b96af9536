import hashlib
import io
import json

import pytest

from outagecast import cli
from outagecast import datastore as ds
from outagecast.pipeline import prepare

SMALL = "max_epochs = 2\npatience = 1\nhidden1 = 8\nhidden2 = 8\nembed = 6\ncell = 6\nstate = 8\n"


def _digest(d):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(d.iterdir())}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.txt"
    cfg.write_text(SMALL, encoding="utf-8")
    data, model, ev = root / "data", root / "model", root / "eval"
    codes = {}
    codes["gen"] = cli.main(["gen-data", "--seed", "7", "--n-outages", "300", "--out", str(data)])
    before = _digest(data)
    common = ["--data-dir", str(data), "--config", str(cfg), "--seed", "1"]
    codes["init"] = cli.main(["train-initial", *common, "--out", str(model)])
    codes["rt"] = cli.main(["train-realtime", *common, "--out", str(model)])
    ck = ["--data-dir", str(data), "--checkpoint", str(model), "--out", str(ev)]
    codes["eval"] = cli.main(["evaluate", *ck])
    codes["att"] = cli.main(["attention", *ck])
    codes["big"] = cli.main(["bigrams", "--attention", str(ev / "attention.jsonl"), "--out", str(ev)])
    return dict(root=root, data=data, model=model, eval=ev, codes=codes, before=before, cfg=cfg)


class TestUsage:
    def test_no_command(self, capsys):
        assert cli.main([]) == cli.EXIT_USAGE

    def test_unknown_flag(self, capsys):
        assert cli.main(["train-initial", "--bogus"]) == cli.EXIT_USAGE
        assert "unrecognized" in capsys.readouterr().err

    def test_unknown_command(self, capsys):
        assert cli.main(["fly"]) == cli.EXIT_USAGE

    def test_missing_data_dir(self, tmp_path, capsys):
        assert cli.main(["train-initial", "--out", str(tmp_path)]) == cli.EXIT_USAGE

    def test_bad_config_value(self, tmp_path, capsys):
        cfg = tmp_path / "c.txt"
        cfg.write_text("lr = fast\n", encoding="utf-8")
        assert cli.main(["train-initial", "--config", str(cfg), "--data-dir", str(tmp_path)]) == cli.EXIT_USAGE

    def test_invalid_training_value(self, tmp_path, capsys):
        assert cli.main(["train-initial", "--lr", "-1", "--data-dir", str(tmp_path)]) == cli.EXIT_USAGE

    @pytest.mark.parametrize("cmd", sorted(cli.COMMANDS))
    def test_help_lists_flags(self, cmd, capsys):
        assert cli.main([cmd, "--help"]) == cli.EXIT_OK
        out = capsys.readouterr().out
        assert "--seed" in out and "--out" in out and "--config" in out

    def test_help_mentions_units(self, capsys):
        cli.main(["train-initial", "--help"])
        out = capsys.readouterr().out
        assert "(epochs)" in out and "hours" in out
        cli.main(["gen-data", "--help"])
        assert "(count)" in capsys.readouterr().out


class TestGenData:
    def test_byte_identical(self, tmp_path, capsys):
        for sub in ("a", "b"):
            assert cli.main(["gen-data", "--seed", "7", "--n-outages", "40", "--out", str(tmp_path / sub)]) == 0
        a, b = _digest(tmp_path / "a"), _digest(tmp_path / "b")
        a.pop("manifest-gen-data.json")
        b.pop("manifest-gen-data.json")
        assert a == b

    def test_manifest(self, tmp_path, capsys):
        cli.main(["gen-data", "--seed", "3", "--n-outages", "10", "--out", str(tmp_path)])
        man = json.loads((tmp_path / "manifest-gen-data.json").read_text())
        assert man["outcome"] == "ok" and man["seed"] == 3
        assert man["config"]["generator"]["n_outages"] == 10
        for art in man["artifacts"]:
            assert (tmp_path / art.split("/")[-1]).exists()


class TestPipeline:
    def test_all_stages_succeed(self, pipeline):
        assert pipeline["codes"] == {k: 0 for k in pipeline["codes"]}

    def test_inputs_not_mutated(self, pipeline):
        assert _digest(pipeline["data"]) == pipeline["before"]

    def test_artifacts(self, pipeline):
        names = {p.name for p in pipeline["eval"].iterdir()}
        assert {"metrics.csv", "baseline.csv", "per-report.csv", "attention.jsonl", "bigrams.csv"} <= names
        curve = (pipeline["eval"] / "per-report.csv").read_text().splitlines()
        assert len(curve) == 5

    def test_manifest_records_config_and_hashes(self, pipeline):
        man = json.loads((pipeline["model"] / "manifest-train-initial.json").read_text())
        assert man["config"]["train"]["hidden1"] == 8      # from the config file
        assert man["config"]["train"]["seed"] == 1         # from the flag
        assert len(man["inputs"]) == 3 and all(len(h) == 64 for h in man["inputs"].values())
        assert all(a.endswith((".npz", ".csv")) for a in man["artifacts"])

    def test_flag_beats_config_file(self, pipeline, tmp_path, capsys):
        out = tmp_path / "m"
        code = cli.main(["train-initial", "--data-dir", str(pipeline["data"]), "--config", str(pipeline["cfg"]),
                         "--max-epochs", "1", "--out", str(out)])
        assert code == 0
        man = json.loads((out / "manifest-train-initial.json").read_text())
        assert man["config"]["train"]["max_epochs"] == 1 and man["config"]["train"]["hidden2"] == 8

    def test_retraining_is_bitwise_identical(self, pipeline, tmp_path, capsys):
        out = tmp_path / "again"
        cli.main(["train-initial", "--data-dir", str(pipeline["data"]), "--config", str(pipeline["cfg"]),
                  "--seed", "1", "--out", str(out)])
        a = (pipeline["model"] / "initial.npz").read_bytes()
        assert (out / "initial.npz").read_bytes() == a

    def test_report(self, pipeline, tmp_path, capsys):
        prep = prepare(ds.load_dir(pipeline["data"])[0])
        ex = prep["test"].examples[0]
        code = cli.main(["report", "--data-dir", str(pipeline["data"]), "--checkpoint", str(pipeline["model"]),
                         "--outage-id", ex.id, "--out", str(tmp_path)])
        assert code == 0
        lines = (tmp_path / "report.tsv").read_text().splitlines()
        assert lines[0].split("\t") == ["report", "elapsed_h", "k", "theta_h", "mode_h", "mean_h", "q80_h"]
        assert len(lines) == 2 + len(ex.logs)

    def test_report_unknown_outage(self, pipeline, tmp_path, capsys):
        code = cli.main(["report", "--data-dir", str(pipeline["data"]), "--checkpoint", str(pipeline["model"]),
                         "--outage-id", "NOPE", "--out", str(tmp_path)])
        assert code == cli.EXIT_DATA and "not found" in capsys.readouterr().err

    def test_predict_streams_rows(self, pipeline, monkeypatch, capsys):
        logs = "0.5\tLights out at 400 S Cherry St.\n1.2\tFound tree on TP 231, crew on site.\n"
        monkeypatch.setattr("sys.stdin", io.StringIO(logs))
        outage = '{"start":"2015-07-01T06:30:00","feeder":"FDR-2610","line_type":"overhead","customers":113}'
        code = cli.main(["predict", "--data-dir", str(pipeline["data"]), "--checkpoint", str(pipeline["model"]),
                         "--outage", outage])
        assert code == 0
        rows = capsys.readouterr().out.strip().splitlines()
        assert len(rows) == 4
        for row in rows[1:]:
            _, _, k, th, mode, mean, q80 = map(float, row.split("\t"))
            assert k > 0 and th > 0
            assert mode <= mean and mode <= q80

    def test_predict_rejects_out_of_order_logs(self, pipeline, monkeypatch, capsys):
        monkeypatch.setattr("sys.stdin", io.StringIO("2.0\ta\n1.0\tb\n"))
        outage = '{"start":"2015-07-01T06:30:00","feeder":"F","line_type":"overhead","customers":1}'
        code = cli.main(["predict", "--data-dir", str(pipeline["data"]), "--checkpoint", str(pipeline["model"]),
                         "--outage", outage])
        assert code == cli.EXIT_DATA

    def test_predict_bad_outage(self, pipeline, capsys):
        code = cli.main(["predict", "--data-dir", str(pipeline["data"]), "--checkpoint", str(pipeline["model"]),
                         "--outage", "{}"])
        assert code == cli.EXIT_DATA


class TestDataErrors:
    def test_missing_checkpoint(self, pipeline, tmp_path, capsys):
        code = cli.main(["evaluate", "--data-dir", str(pipeline["data"]), "--checkpoint",
                         str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
        assert code == cli.EXIT_DATA
        assert "initial.npz" in capsys.readouterr().err
        man = json.loads((tmp_path / "o" / "manifest-evaluate.json").read_text())
        assert man["outcome"].startswith("data error")

    def test_missing_data_files(self, tmp_path, capsys):
        assert cli.main(["train-initial", "--data-dir", str(tmp_path)]) == cli.EXIT_DATA

    def test_corrupt_attention_file(self, tmp_path, capsys):
        bad = tmp_path / "att.jsonl"
        bad.write_text('{"outage": "o"}\n', encoding="utf-8")
        assert cli.main(["bigrams", "--attention", str(bad), "--out", str(tmp_path)]) == cli.EXIT_DATA
