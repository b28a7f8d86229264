import numpy as np

from warpadam.cli import main
from warpadam.bench import read_curve_csv
from warpadam.tasks import load_table
from warpadam.warp import load_warps

from test_tasks import make_tree


SMALL_RUN = """
run.optimizer=adam
run.n_tasks=2
run.steps_per_task=10
run.eval_every=5
run.seed=3
hyper.eta=0.05
model.hidden=8
tasks.synth.alphabets=2
tasks.synth.classes=5
tasks.synth.instances=12
tasks.synth.dim=8
tasks.synth.noise=0.1
tasks.n_way=3
tasks.k_shot=2
tasks.query_per_class=3
"""

SMALL_META = """
run.seed=5
model.hidden=0
meta.inner_steps=3
meta.outer_steps=4
meta.outer_eta=0.003
meta.tasks_per_outer_step=2
meta.eval_episodes=4
meta.eval_every=2
inner.eta=0.1
inner.epsilon=0.1
tasks.synth.alphabets=4
tasks.synth.classes=4
tasks.synth.instances=10
tasks.synth.dim=6
tasks.synth.noise=0.4
tasks.n_way=3
tasks.k_shot=1
tasks.query_per_class=3
tasks.train_alphabets=alpha00,alpha01,alpha02
tasks.eval_alphabets=alpha03
"""


def write_cfg(tmp_path, text, name="cfg.txt"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


# ---------------------------------------------------------------------------
# run

def test_run_writes_curve_and_manifest(tmp_path):
    cfg = write_cfg(tmp_path, SMALL_RUN)
    out = tmp_path / "out"
    assert main(["run", "--config", cfg, "--out", str(out)]) == 0
    records = read_curve_csv(out / "curve.csv")
    assert len(records) == 2 * 2
    manifest = (out / "manifest.txt").read_text()
    assert "run.seed=3" in manifest
    assert "command=run" in manifest
    assert "library.version=" in manifest


def test_run_rerun_from_manifest_is_bit_identical_except_wall(tmp_path):
    cfg = write_cfg(tmp_path, SMALL_RUN)
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    assert main(["run", "--config", cfg, "--out", str(out1)]) == 0
    assert main(["run", "--config", str(out1 / "manifest.txt"), "--out", str(out2)]) == 0
    r1 = read_curve_csv(out1 / "curve.csv")
    r2 = read_curve_csv(out2 / "curve.csv")
    strip = lambda rs: [(r.task_index, r.step, r.train_loss, r.train_acc, r.val_loss, r.val_acc)
                        for r in rs]
    assert strip(r1) == strip(r2)


def test_run_divergence_exits_3(tmp_path):
    cfg = write_cfg(tmp_path, SMALL_RUN)
    out = tmp_path / "out"
    code = main(["run", "--config", cfg, "--out", str(out),
                 "--set", "run.optimizer=sgd", "--set", "hyper.eta=1e308"])
    assert code == 3
    assert (out / "curve.csv").exists()


def test_unknown_config_key_is_usage_error(tmp_path):
    cfg = write_cfg(tmp_path, SMALL_RUN + "\nbogus.key=1\n")
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_unknown_flag_is_error(tmp_path):
    assert main(["run", "--out", str(tmp_path / "o"), "--frobnicate"]) == 2


def test_seed_precedence_flag_file_env(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path, SMALL_RUN.replace("run.seed=3", ""))
    monkeypatch.setenv("WARP_SEED", "11")
    out_env = tmp_path / "env"
    assert main(["run", "--config", cfg, "--out", str(out_env)]) == 0
    assert "run.seed=11" in (out_env / "manifest.txt").read_text()
    assert "seed.source=env" in (out_env / "manifest.txt").read_text()

    out_flag = tmp_path / "flag"
    assert main(["run", "--config", cfg, "--out", str(out_flag), "--seed", "4"]) == 0
    assert "run.seed=4" in (out_flag / "manifest.txt").read_text()
    assert "seed.source=flag" in (out_flag / "manifest.txt").read_text()


# ---------------------------------------------------------------------------
# meta-train

def test_meta_train_zero_steps_checkpoint_is_identity(tmp_path):
    cfg = write_cfg(tmp_path, SMALL_META)
    out = tmp_path / "out"
    assert main(["meta-train", "--config", cfg, "--out", str(out),
                 "--set", "meta.outer_steps=0"]) == 0
    warps = load_warps(out / "warps.bin")
    rng = np.random.default_rng(0)
    for w in warps:
        g = rng.normal(size=w.dim)
        assert np.array_equal(w.apply(g), g)


def test_meta_train_same_seed_bit_identical_checkpoints(tmp_path):
    cfg = write_cfg(tmp_path, SMALL_META)
    o1, o2 = tmp_path / "m1", tmp_path / "m2"
    assert main(["meta-train", "--config", cfg, "--out", str(o1)]) == 0
    assert main(["meta-train", "--config", cfg, "--out", str(o2)]) == 0
    assert (o1 / "warps.bin").read_bytes() == (o2 / "warps.bin").read_bytes()


def test_meta_train_writes_curve_with_eval_column(tmp_path):
    cfg = write_cfg(tmp_path, SMALL_META)
    out = tmp_path / "out"
    assert main(["meta-train", "--config", cfg, "--out", str(out)]) == 0
    lines = (out / "meta_curve.csv").read_text().splitlines()
    assert lines[0] == "outer_step,batch_query_loss,tod_value,eval_query_loss"
    assert len(lines) == 1 + 4 + 1  # header + outer steps + final eval row
    first = lines[1].split(",")
    last = lines[-1].split(",")
    assert float(first[3]) > 0.0          # eval recorded at step 0
    assert np.isfinite(float(last[3]))    # and after the final step


def test_meta_train_requires_explicit_split(tmp_path):
    cfg = write_cfg(tmp_path, SMALL_META.replace("tasks.eval_alphabets=alpha03", ""))
    assert main(["meta-train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_meta_train_rejects_overlapping_split(tmp_path):
    cfg = write_cfg(tmp_path, SMALL_META.replace(
        "tasks.eval_alphabets=alpha03", "tasks.eval_alphabets=alpha00"))
    assert main(["meta-train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_meta_trained_checkpoint_feeds_run(tmp_path):
    cfg = write_cfg(tmp_path, SMALL_META)
    out_m = tmp_path / "meta"
    assert main(["meta-train", "--config", cfg, "--out", str(out_m)]) == 0
    out_r = tmp_path / "run"
    # same task family and model shape, so the checkpoint dimensions line up
    code = main(["run", "--config", cfg, "--out", str(out_r),
                 "--set", "run.optimizer=warpadam",
                 "--set", f"warp.checkpoint={out_m / 'warps.bin'}",
                 "--set", "run.n_tasks=1", "--set", "run.steps_per_task=4",
                 "--set", "run.eval_every=2", "--set", "hyper.eta=0.1",
                 "--set", "hyper.epsilon=0.1"])
    assert code == 0
    assert read_curve_csv(out_r / "curve.csv")


# ---------------------------------------------------------------------------
# compare

COMPARE_EXTRA = """
compare.optimizers=sgd,momentum,radam,adamw,warpadam
run.n_tasks=1
run.steps_per_task=6
run.eval_every=3
tasks2.synth.alphabets=2
tasks2.synth.classes=4
tasks2.synth.instances=10
tasks2.synth.dim=6
tasks2.synth.noise=0.05
tasks2.n_way=3
tasks2.k_shot=1
tasks2.query_per_class=2
"""


def test_compare_two_blocks_and_columns(tmp_path):
    cfg = write_cfg(tmp_path, SMALL_RUN + COMPARE_EXTRA)
    out = tmp_path / "out"
    assert main(["compare", "--config", cfg, "--out", str(out)]) == 0
    text = (out / "compare.csv").read_text()
    lines = text.splitlines()
    assert lines[0] == "algorithm,training_time_s,convergence_epochs,validation_accuracy_pct"
    data = [ln for ln in lines if ln and not ln.startswith("#")]
    assert len(data) == 1 + 10  # header + 5 optimizers x 2 blocks
    names = [ln.split(",")[0] for ln in data[1:]]
    assert names == ["sgd", "momentum", "radam", "adamw", "warpadam"] * 2
    assert len(text.split("\n\n")) == 2


def test_compare_single_optimizer_is_usage_error(tmp_path):
    cfg = write_cfg(tmp_path, SMALL_RUN + "compare.optimizers=adam\n")
    assert main(["compare", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


# ---------------------------------------------------------------------------
# check and import

def test_check_command_passes_fresh():
    assert main(["check"]) == 0


def test_check_command_negative_control():
    assert main(["check", "--perturb", "1e-3"]) == 1


def test_import_command(tmp_path):
    tree = tmp_path / "tree"
    tree.mkdir()
    make_tree(tree, alphabets=3, chars=2, insts=4, side=5)
    out = tmp_path / "out"
    assert main(["import", "--root", str(tree), "--side", "4", "--out", str(out)]) == 0
    table = load_table(out / "table.wtbl")
    assert len(table.alphabets) == 3
    assert table.dim == 16
    manifest = (out / "manifest.txt").read_text()
    assert "imported.alphabets=3" in manifest


def test_import_requires_root(tmp_path):
    assert main(["import", "--out", str(tmp_path / "o")]) == 2


def test_imported_table_feeds_run(tmp_path):
    tree = tmp_path / "tree"
    tree.mkdir()
    make_tree(tree, alphabets=2, chars=4, insts=8, side=4)
    out_t = tmp_path / "tbl"
    assert main(["import", "--root", str(tree), "--side", "4", "--out", str(out_t)]) == 0
    out_r = tmp_path / "run"
    code = main(["run", "--out", str(out_r), "--seed", "1",
                 "--set", "run.optimizer=adam", "--set", "run.n_tasks=1",
                 "--set", "run.steps_per_task=4", "--set", "run.eval_every=2",
                 "--set", "tasks.source=table",
                 "--set", f"tasks.table={out_t / 'table.wtbl'}",
                 "--set", "tasks.n_way=3", "--set", "tasks.k_shot=2",
                 "--set", "tasks.query_per_class=2", "--set", "model.hidden=4"])
    assert code == 0
    assert read_curve_csv(out_r / "curve.csv")
