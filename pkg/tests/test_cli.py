import json

import numpy as np
import pytest

from frpt.cli import main
from frpt.container import file_digest

TINY_ARCH = {
    "input_shape": [1, 10, 10],
    "units": [
        {"kind": "conv", "out_channels": 2, "kernel": [3, 3], "activation": "tanh", "pool": 2},
        {"kind": "conv", "out_channels": 3, "kernel": [2, 2], "activation": "tanh"},
        {"kind": "fc", "out_features": 3, "activation": "identity"},
    ],
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthetic data directory plus a pretrained checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", "--out", str(data), "--classes", "3", "--per-class", "40",
                 "--test-per-class", "15", "--height", "10", "--width", "10",
                 "--seed", "5", "--noise", "0.03"]) == 0
    config = root / "pretrain.json"
    config.write_text(json.dumps({
        "architecture": TINY_ARCH, "epochs": 20, "seed": 0, "batch_size": 16,
    }))
    model = root / "model.frpt"
    assert main(["pretrain", "--config", str(config), "--data", str(data),
                 "--out", str(model)]) == 0
    return root, data, config, model


class TestExitCodes:
    def test_missing_config_is_config_error(self, workspace, tmp_path):
        _, data, _, _ = workspace
        code = main(["pretrain", "--config", str(tmp_path / "nope.json"),
                     "--data", str(data), "--out", str(tmp_path / "m.frpt")])
        assert code == 2

    def test_invalid_json_is_config_error(self, workspace, tmp_path):
        _, data, _, _ = workspace
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        code = main(["pretrain", "--config", str(bad), "--data", str(data),
                     "--out", str(tmp_path / "m.frpt")])
        assert code == 2

    def test_missing_data_is_io_error(self, workspace, tmp_path):
        _, _, config, _ = workspace
        code = main(["pretrain", "--config", str(config),
                     "--data", str(tmp_path / "absent"),
                     "--out", str(tmp_path / "m.frpt")])
        assert code == 3

    def test_recon_lr_mismatch_is_consistency_error(self, workspace, tmp_path):
        root, data, _, model = workspace
        recon = tmp_path / "targets.frrc"
        assert main(["recon", "--model", str(model), "--data", str(data),
                     "--lr", "3", "--embed", "ne", "--out", str(recon)]) == 0
        code = main(["posttrain", "--model", str(model), "--data", str(data),
                     "--mode", "fr", "--l-s", "0", "--l-r", "2", "--epochs", "1",
                     "--batch-size", "32", "--recon", str(recon)])
        assert code == 5

    def test_fr_without_recon_is_config_error(self, workspace, tmp_path):
        _, data, _, model = workspace
        code = main(["posttrain", "--model", str(model), "--data", str(data),
                     "--mode", "fr", "--l-s", "0", "--l-r", "3", "--epochs", "1"])
        assert code == 2


class TestPretrain:
    def test_deterministic_checkpoint(self, workspace, tmp_path):
        _, data, config, model = workspace
        rerun = tmp_path / "rerun.frpt"
        assert main(["pretrain", "--config", str(config), "--data", str(data),
                     "--out", str(rerun)]) == 0
        assert file_digest(rerun) == file_digest(model)

    def test_snapshots_and_manifest(self, workspace, tmp_path):
        _, data, config, _ = workspace
        out = tmp_path / "snap.frpt"
        assert main(["pretrain", "--config", str(config), "--data", str(data),
                     "--out", str(out), "--snapshot-every", "2"]) == 0
        snapshots = sorted(tmp_path.glob("snap.epoch*.frpt"))
        assert len(snapshots) == 10
        assert snapshots[0].name == "snap.epoch002.frpt"
        assert snapshots[-1].name == "snap.epoch020.frpt"
        manifest = json.loads((tmp_path / "snap.frpt.manifest.json").read_text())
        assert manifest["command"] == "pretrain"
        assert str(out) in manifest["outputs"]
        assert manifest["outputs"][str(out)] == file_digest(out)


class TestEval:
    def test_prints_three_decimals(self, workspace, capsys):
        _, data, _, model = workspace
        assert main(["eval", "--model", str(model), "--data", str(data)]) == 0
        line = capsys.readouterr().out.strip()
        assert line.startswith("accuracy ")
        value = line.split()[1]
        assert len(value.split(".")[1]) == 3
        assert float(value) >= 0.9


class TestReconCommand:
    def test_digest_stable_and_diagnostics(self, workspace, tmp_path, capsys):
        _, data, _, model = workspace
        first = tmp_path / "a.frrc"
        second = tmp_path / "b.frrc"
        assert main(["recon", "--model", str(model), "--data", str(data),
                     "--lr", "2", "--embed", "ne", "--out", str(first)]) == 0
        out = capsys.readouterr().out
        assert "forward-consistency" in out
        assert main(["recon", "--model", str(model), "--data", str(data),
                     "--lr", "2", "--embed", "ne", "--out", str(second)]) == 0
        assert file_digest(first) == file_digest(second)

    def test_onehot_available(self, workspace, tmp_path):
        _, data, _, model = workspace
        assert main(["recon", "--model", str(model), "--data", str(data),
                     "--lr", "3", "--embed", "onehot",
                     "--out", str(tmp_path / "oh.frrc")]) == 0


class TestPosttrainCommand:
    def test_fr_run_with_csv(self, workspace, tmp_path):
        _, data, _, model = workspace
        recon = tmp_path / "t.frrc"
        assert main(["recon", "--model", str(model), "--data", str(data),
                     "--lr", "3", "--embed", "ne", "--out", str(recon)]) == 0
        csv_path = tmp_path / "runs.csv"
        assert main(["posttrain", "--model", str(model), "--data", str(data),
                     "--mode", "fr", "--l-s", "0", "--l-r", "3", "--alpha", "0.1",
                     "--epochs", "2", "--batch-size", "32", "--seeds", "0,1",
                     "--recon", str(recon), "--out-csv", str(csv_path),
                     "--record", "1,2"]) == 0
        rows = csv_path.read_text().splitlines()
        assert rows[0] == "mode,l_S,l_R,params,seed,epoch,accuracy,embed"
        assert len(rows) == 1 + 2 * 2  # 2 seeds x 2 recorded epochs
        agg = (tmp_path / "runs.agg.csv").read_text().splitlines()
        assert agg[0] == "mode,l_S,l_R,params,epoch,mean,std,embed"


class TestHeatmapCommand:
    def test_writes_parseable_pgm_and_csv(self, workspace, tmp_path):
        _, data, _, model = workspace
        out = tmp_path / "maps"
        assert main(["heatmap", "--model", str(model), "--data", str(data),
                     "--lr", "2", "--embed", "ne", "--instance", "1",
                     "--out", str(out)]) == 0
        pgms = sorted(out.glob("deviation_ch*.pgm"))
        assert len(pgms) == 3  # unit 2 has three channels
        raw = pgms[0].read_bytes()
        assert raw.startswith(b"P5\n")
        header, rest = raw.split(b"\n255\n", 1)
        w, h = map(int, header.split(b"\n")[1].split())
        assert len(rest) == w * h
        csv_rows = (out / "deviations.csv").read_text().splitlines()
        assert csv_rows[0] == "channel,row,col,value"
        assert len(csv_rows) == 1 + 3 * h * w
        cv2 = pytest.importorskip("cv2")
        image = cv2.imread(str(pgms[0]), cv2.IMREAD_GRAYSCALE)
        assert image is not None and image.shape == (h, w)

    def test_zero_deviation_gives_zero_pgm(self, workspace, tmp_path):
        # Correct strict-argmax prediction leaves the reconstruction at the
        # forward feature, so the exported map is identically zero.
        import frpt.network as network_mod
        from frpt.data import load_labeled_dataset, save_labeled_dataset, instance_normalize
        _, data, _, model = workspace
        net = network_mod.load_checkpoint(model)
        test = instance_normalize(load_labeled_dataset(data / "test.frsy"))
        logits = network_mod.forward_logits(net, test.images[:1])
        raw = load_labeled_dataset(data / "test.frsy")
        raw.labels[0] = int(logits.argmax())
        patched = tmp_path / "patched"
        patched.mkdir()
        save_labeled_dataset(raw, patched / "test.frsy")
        save_labeled_dataset(raw, patched / "train.frsy")
        out = tmp_path / "zero_maps"
        assert main(["heatmap", "--model", str(model), "--data", str(patched),
                     "--lr", "2", "--embed", "ne", "--instance", "0",
                     "--out", str(out)]) == 0
        for pgm in out.glob("deviation_ch*.pgm"):
            payload = pgm.read_bytes().split(b"\n255\n", 1)[1]
            assert set(payload) <= {0}


class TestCompareCommand:
    def test_last_layer_three_way_ablation(self, workspace, tmp_path):
        _, data, _, model = workspace
        out = tmp_path / "ablation"
        assert main(["compare", "--model", str(model), "--data", str(data),
                     "--modes", "bp,fr", "--embed", "ma,ne,onehot",
                     "--pairs", "last", "--epochs", "1", "--batch-size", "32",
                     "--seeds", "0,1", "--record", "1",
                     "--out-dir", str(out)]) == 0
        rows = (out / "runs.csv").read_text().splitlines()
        header, body = rows[0], rows[1:]
        embeds = {line.split(",")[-1] for line in body}
        assert embeds == {"", "ma", "ne", "onehot"}
        modes = {line.split(",")[0] for line in body}
        assert modes == {"bp", "fr"}
        # 1 bp + 3 fr configurations x 2 seeds x 1 recorded epoch
        assert len(body) == 8

    def test_full_sweep_enumerates_all_pairs(self, workspace, tmp_path):
        _, data, _, model = workspace
        out = tmp_path / "sweep"
        assert main(["compare", "--model", str(model), "--data", str(data),
                     "--modes", "bp,fr", "--embed", "ne", "--epochs", "1",
                     "--batch-size", "32", "--seeds", "0", "--record", "1",
                     "--out-dir", str(out)]) == 0
        body = (out / "runs.csv").read_text().splitlines()[1:]
        pairs = {(row.split(",")[0], row.split(",")[1], row.split(",")[2])
                 for row in body}
        expected = {(mode, str(l_s), str(l_r))
                    for mode in ("bp", "fr")
                    for l_r in (1, 2, 3) for l_s in range(l_r)}
        assert pairs == expected

    def test_reruns_are_byte_identical(self, workspace, tmp_path):
        _, data, _, model = workspace
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        for out in (out_a, out_b):
            assert main(["compare", "--model", str(model), "--data", str(data),
                         "--modes", "fr", "--embed", "ne", "--pairs", "last",
                         "--epochs", "1", "--batch-size", "32", "--seeds", "0,1,2",
                         "--record", "1", "--out-dir", str(out)]) == 0
        assert (out_a / "runs.csv").read_bytes() == (out_b / "runs.csv").read_bytes()
        assert (out_a / "aggregate.csv").read_bytes() == (out_b / "aggregate.csv").read_bytes()


class TestWorkerFanOut:
    def test_thread_pool_matches_sequential(self, workspace, tmp_path, monkeypatch):
        _, data, _, model = workspace
        sequential = tmp_path / "seq"
        threaded = tmp_path / "thr"
        argv_tail = ["--model", str(model), "--data", str(data), "--modes", "bp,fr",
                     "--embed", "ne", "--epochs", "1", "--batch-size", "32",
                     "--seeds", "0,1", "--record", "1"]
        monkeypatch.delenv("FRPT_THREADS", raising=False)
        assert main(["compare", *argv_tail, "--out-dir", str(sequential)]) == 0
        monkeypatch.setenv("FRPT_THREADS", "3")
        assert main(["compare", *argv_tail, "--out-dir", str(threaded)]) == 0
        assert (sequential / "runs.csv").read_bytes() == (threaded / "runs.csv").read_bytes()


class TestSavedModels:
    def test_checkpoints_saved_at_recorded_epochs(self, workspace, tmp_path):
        _, data, _, model = workspace
        models_dir = tmp_path / "models"
        assert main(["posttrain", "--model", str(model), "--data", str(data),
                     "--mode", "bp", "--l-s", "0", "--l-r", "3", "--epochs", "2",
                     "--batch-size", "32", "--seeds", "0,1", "--record", "1,2",
                     "--save-models", str(models_dir)]) == 0
        names = sorted(p.name for p in models_dir.glob("*.frpt"))
        assert names == [
            "bp_0_3_seed0_epoch001.frpt", "bp_0_3_seed0_epoch002.frpt",
            "bp_0_3_seed1_epoch001.frpt", "bp_0_3_seed1_epoch002.frpt",
        ]
