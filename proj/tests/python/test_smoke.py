"""End-to-end smoke tests for the rrtkit python module and the CLI."""

import math
import os
import subprocess

import pytest

import rrtkit


@pytest.fixture(scope="module")
def checkpoints(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("ckpts")
    vanilla = str(tmp / "vanilla.ckpt")
    rec = str(tmp / "rec.ckpt")
    rrtkit.make_toy_checkpoint(vanilla, n_layers=4, d_model=16, n_heads=4,
                               n_kv_heads=2, d_ffn=24, vocab_size=31, seed=9)
    config = rrtkit.convert_checkpoint(vanilla, rec, blocks=2, init="stepwise",
                                       lora_rank=4, seed=1)
    assert config["n_blocks"] == 2
    assert config["lora_rank"] == 4
    return {"vanilla": vanilla, "rec": rec}


def test_inspect_roundtrip(checkpoints):
    info = rrtkit.inspect_checkpoint(checkpoints["rec"])
    assert info["n_layers"] == 4
    assert info["n_blocks"] == 2
    names = {name for name, _ in info["tensors"]}
    assert "block.1.attn.q.weight" in names
    assert "lora.2.1.q.b" in names
    assert "layer.1.attn.q.weight" not in names


def test_forward_and_decode(checkpoints):
    model = rrtkit.Model(checkpoints["rec"])
    logits = model.forward([1, 2, 3])
    assert len(logits) == 2          # one logit matrix per loop
    assert len(logits[0]) == 3       # one row per position
    assert len(logits[0][0]) == 31   # vocab width
    assert all(math.isfinite(v) for row in logits[-1] for v in row)

    out = model.decode_greedy([1, 2, 3], 5)
    assert len(out["generated"]) == 5
    assert all(0 <= t < 31 for t in out["generated"])
    assert all(1 <= e <= 2 for e in out["exit_loops"])

    # Determinism: same prompt, same logits.
    again = rrtkit.Model(checkpoints["rec"]).forward([1, 2, 3])
    assert again == logits


def test_conversion_helpers():
    assert rrtkit.stepwise_indices(6, 3) == [1, 3, 6]
    coeffs = rrtkit.exit_coefficients("weighted", 2)
    assert coeffs == pytest.approx([1 / 3, 2 / 3])
    assert rrtkit.exit_coefficients("aggressive", 3, 0.1) == pytest.approx([0.1, 0.1, 1.0])


def test_exit_and_loss_helpers():
    final = [[0.0, 3.0], [5.0, 0.0]]
    early = [[0.0, 2.0], [0.0, 4.0]]  # matches position 0 only
    assert rrtkit.oracle_exits([early, final]) == [1, 2]

    assert rrtkit.kd_divergence(final, final, "jsd") == pytest.approx(0.0, abs=1e-12)
    assert rrtkit.kd_divergence(final, early, "tvd") > 0.0

    loss = rrtkit.early_exit_loss([early, final], targets=[1, 0], scheme="weighted")
    assert loss["total"] == pytest.approx(
        sum(c * l for c, l in zip(loss["coefficients"], loss["per_loop"])))


def test_simulate_two_batch_fixture():
    workload = [(4, 1, [3])] * 48
    table = [(32, 3.0)]
    vanilla = rrtkit.simulate(workload, "vanilla", 3, 32, table)
    cdb = rrtkit.simulate(workload, "cdb", 3, 32, table)
    assert vanilla["total_time"] == pytest.approx(6.0)
    assert cdb["total_time"] == pytest.approx(4.0)
    assert cdb["throughput"] == pytest.approx(1.5 * vanilla["throughput"])


def test_validation_errors_surface(tmp_path):
    with pytest.raises(rrtkit.IoError):
        rrtkit.inspect_checkpoint(str(tmp_path / "missing.ckpt"))
    with pytest.raises(rrtkit.Error):
        rrtkit.simulate([(4, 1, [9])], "cdb", 3, 32, [(32, 3.0)])


def test_cli_available(checkpoints):
    cli = os.environ.get("RRT_CLI")
    if not cli:
        pytest.skip("RRT_CLI not set")
    result = subprocess.run([cli, "inspect", checkpoints["rec"]],
                            capture_output=True, text=True, timeout=60)
    assert result.returncode == 0
    assert "block.1.attn.q.weight" in result.stdout
