import pandas as pd
import pytest

import kafforge
from data import ICRD_HEADER, load_icrd
from errors import FormatError, NumericError

SMALL_RUN = """
    data.generator = blobs
    data.classes = 3
    data.n_per_class = 40
    data.n_val = 30
    data.n_test = 30
    network.arch = mlp
    network.hidden = 30
    network.activation = multikaf
    train.max_iters = 40
    train.eval_every = 10
    train.patience = 20
    train.lr = {lr}
    output.dir = {out}
"""


@pytest.fixture(autouse=True)
def quiet(monkeypatch):
    monkeypatch.setenv("KAFFORGE_VERBOSE", "0")
    monkeypatch.setenv("KAFFORGE_THREADS", "1")


@pytest.fixture
def trained(write_config, tmp_path):
    """Checkpoint of an untrained (lr = 0) multi-KAF MLP; the KAF is layer 2"""
    config = write_config(SMALL_RUN.format(lr=0.0, out="run"))
    assert kafforge.main(["train", str(config)]) == kafforge.EXIT_OK
    return tmp_path / "run" / kafforge.CHECKPOINT_NAME


def test_train_writes_run_artifacts(write_config, tmp_path):
    config = write_config(SMALL_RUN.format(lr=0.01, out="first"))
    assert kafforge.main(["train", str(config)]) == kafforge.EXIT_OK
    run = tmp_path / "first"
    for name in ("loss.csv", "val.csv", "report.txt", kafforge.CHECKPOINT_NAME, kafforge.NETWORK_CONFIG_NAME):
        assert (run / name).is_file(), name
    loss = pd.read_csv(run / "loss.csv")
    assert list(loss.columns) == ["iteration", "loss"]
    assert loss["iteration"].tolist() == list(range(len(loss)))
    assert "stop_reason" in (run / "report.txt").read_text()

    again = write_config(SMALL_RUN.format(lr=0.01, out="second"), name="again.cfg")
    assert kafforge.main(["train", str(again)]) == kafforge.EXIT_OK
    assert (tmp_path / "second" / "loss.csv").read_bytes() == (run / "loss.csv").read_bytes()
    assert (tmp_path / "second" / "val.csv").read_bytes() == (run / "val.csv").read_bytes()


def test_train_with_two_sources_is_a_usage_error(write_config):
    config = write_config("data.generator = blobs\ndata.icrd = x.icrd\noutput.dir = out\n")
    assert kafforge.main(["train", str(config)]) == kafforge.EXIT_USAGE


def test_train_missing_config_is_a_usage_error(tmp_path):
    assert kafforge.main(["train", str(tmp_path / "nope.cfg")]) == kafforge.EXIT_USAGE


def test_plot_activation(trained, tmp_path):
    out = tmp_path / "act.csv"
    code = kafforge.main(["plot-act", str(trained), "--layer", "2", "--neuron", "0",
                          "--range=-1:1", "--steps", "3", "--out", str(out)])
    assert code == kafforge.EXIT_OK
    table = pd.read_csv(out)
    assert list(table.columns) == ["s", "g", "k1_gaussian", "k2_rq", "k3_poly2"]
    assert table["s"].tolist() == [-1.0, 0.0, 1.0]

    default = kafforge.main(["plot-act", str(trained), "--layer", "2", "--neuron", "5"])
    assert default == kafforge.EXIT_OK
    assert len(pd.read_csv(trained.with_name("activation_layer2_neuron5.csv"))) == 121


@pytest.mark.parametrize("layer,neuron", [(2, 30), (2, -1), (1, 0), (9, 0)])
def test_plot_activation_rejects_bad_targets(trained, layer, neuron):
    argv = ["plot-act", str(trained), "--layer", str(layer), f"--neuron={neuron}"]
    assert kafforge.main(argv) == kafforge.EXIT_USAGE


def test_plot_activation_rejects_a_bad_range(trained):
    with pytest.raises(SystemExit) as err:
        kafforge.main(["plot-act", str(trained), "--layer", "2", "--neuron", "0", "--range=1:-1"])
    assert err.value.code == 2


def test_export_mu_of_fresh_network(trained):
    assert kafforge.main(["export-mu", str(trained), "--layer", "2"]) == kafforge.EXIT_OK
    table = pd.read_csv(trained.with_name("mu_layer2.csv"))
    assert list(table.columns) == ["neuron", "mu1", "mu2", "mu3"]
    assert len(table) == 25
    assert table["neuron"].is_monotonic_increasing and table["neuron"].is_unique
    assert table[["mu1", "mu2", "mu3"]].to_numpy() == pytest.approx(1 / 3, abs=1e-15)


def test_export_mu_rejects_other_layers(trained):
    assert kafforge.main(["export-mu", str(trained), "--layer", "1"]) == kafforge.EXIT_USAGE
    assert kafforge.main(["export-mu", str(trained), "--layer", "2", "--sample", "31"]) == kafforge.EXIT_USAGE


def test_corrupt_checkpoint_is_a_usage_error(trained):
    trained.write_bytes(b"KAFW1" + b"\x00" * 3)
    assert kafforge.main(["export-mu", str(trained), "--layer", "2"]) == kafforge.EXIT_USAGE


def test_gen_data_is_deterministic(tmp_path):
    first, second = tmp_path / "a.icrd", tmp_path / "b.icrd"
    for path in (first, second):
        argv = ["gen-data", "blobs", "--n-per-class", "100", "--classes", "2", "--seed", "7", str(path)]
        assert kafforge.main(argv) == kafforge.EXIT_OK
    assert first.read_bytes() == second.read_bytes()
    assert first.stat().st_size == ICRD_HEADER + 200 + 200 * 2
    dataset = load_icrd(first)
    assert dataset.histogram().tolist() == [100, 100]


def test_gen_data_glyphs(tmp_path, capsys):
    out = tmp_path / "g.icrd"
    argv = ["gen-data", "glyphs", "--classes", "4", "--n-per-class", "5", "--height", "12", "--width", "10", str(out)]
    assert kafforge.main(argv) == kafforge.EXIT_OK
    assert load_icrd(out).sample_shape == (1, 12, 10)
    assert "class histogram: 0: 5, 1: 5, 2: 5, 3: 5" in capsys.readouterr().out


def test_gen_data_rejects_unknown_generators_and_arguments(tmp_path):
    with pytest.raises(SystemExit) as err:
        kafforge.main(["gen-data", "spirals", str(tmp_path / "x.icrd")])
    assert err.value.code == 2
    assert kafforge.cmd_gen_data("spirals", {}, tmp_path / "x.icrd") == kafforge.EXIT_USAGE
    assert kafforge.cmd_gen_data("blobs", {"H": 8}, tmp_path / "x.icrd") == kafforge.EXIT_USAGE
    assert kafforge.cmd_gen_data("blobs", {"C": 1}, tmp_path / "x.icrd") == kafforge.EXIT_USAGE


def test_kernels_report(capsys):
    assert kafforge.main(["kernels", "--sets", "5"]) == kafforge.EXIT_OK
    out = capsys.readouterr().out
    for name in ("gaussian", "rq", "poly2", "rq_standard"):
        assert name in out


def test_compare_writes_summaries(write_config, tmp_path):
    config = write_config(SMALL_RUN.format(lr=0.01, out="unused"))
    out = tmp_path / "cmp"
    argv = ["compare", str(config), "--variants", "relu,multikaf", "--seeds", "2", "--out", str(out)]
    assert kafforge.main(argv) == kafforge.EXIT_OK

    summary = pd.read_csv(out / "summary.csv")
    assert summary["variant"].tolist() == ["relu", "relu", "multikaf", "multikaf"]
    assert summary["seed"].tolist() == [0, 1, 0, 1]
    relu_params, multi_params = summary.groupby("variant", sort=False)["param_count"].first()
    assert multi_params - relu_params == 30 * (15 + 3)

    aggregate = pd.read_csv(out / "aggregate.csv")
    assert aggregate["variant"].tolist() == ["relu", "multikaf"]
    assert aggregate["runs"].tolist() == [2, 2]
    reference = summary.loc[summary["variant"] == "relu", "final_val_accuracy"].mean()
    assert aggregate["reference_accuracy"].iloc[0] == pytest.approx(reference)

    curves = pd.read_csv(out / "curves.csv")
    assert {"loss_mean", "loss_std", "accuracy_mean", "accuracy_std"} <= set(curves.columns)
    assert (out / "multikaf" / "seed_1" / kafforge.CHECKPOINT_NAME).is_file()


def test_compare_rejects_unknown_variants(write_config):
    config = write_config(SMALL_RUN.format(lr=0.01, out="unused"))
    assert kafforge.main(["compare", str(config), "--variants", "relu,swish"]) == kafforge.EXIT_USAGE


def test_exit_codes_mapping():
    def raising(error):
        @kafforge.exit_codes
        def command():
            raise error
        return command()

    assert raising(NumericError("nan loss", 3)) == kafforge.EXIT_NUMERIC
    assert raising(FloatingPointError("overflow")) == kafforge.EXIT_NUMERIC
    assert raising(FormatError("bad magic", 0)) == kafforge.EXIT_USAGE
    assert raising(FileNotFoundError("gone")) == kafforge.EXIT_USAGE
    assert raising(RuntimeError("unexpected")) == kafforge.EXIT_NUMERIC
