import numpy as np
import pytest

from mcpo import checkpoint
from mcpo.config import parse_config
from mcpo.errors import CheckpointError
from mcpo.trainer import Trainer

TINY = """
env: pendulum
algorithm: mcpo
horizon: 32
n_actors: 2
epochs: 2
batch_size: 16
hidden: [8]
total_steps: 512
reward_scaling: true
mcpo: {memory_size: 3, write_rule: frequent}
"""


def tiny(text=TINY, **over):
    cfg = parse_config(text)
    for k, v in over.items():
        setattr(cfg, k, v)
    return cfg


def test_file_format_round_trip(tmp_path):
    arrays = {"a": np.array([1.0, -2.5, np.pi]), "b": np.arange(4.0)}
    p = tmp_path / "x.ckpt"
    checkpoint.save(p, {"note": "hi"}, arrays)
    head, back = checkpoint.load(p)
    assert head["note"] == "hi" and head["format_version"] == 1
    assert head["arrays"] == [["a", 3], ["b", 4]]
    for k in arrays:
        assert np.array_equal(back[k], arrays[k])
    assert p.read_bytes().startswith(b"MCPO-CHECKPOINT 1\n")


def test_truncated_and_foreign_files_rejected(tmp_path):
    p = tmp_path / "x.ckpt"
    checkpoint.save(p, {}, {"a": np.ones(10)})
    data = p.read_bytes()
    p.write_bytes(data[:-8])
    with pytest.raises(CheckpointError, match="payload"):
        checkpoint.load(p)
    p.write_bytes(data.split(b"\n")[0])
    with pytest.raises(CheckpointError):
        checkpoint.load(p)
    p.write_bytes(b"hello\n")
    with pytest.raises(CheckpointError):
        checkpoint.load(p)


def test_version_mismatch_rejected(tmp_path):
    p = tmp_path / "x.ckpt"
    checkpoint.save(p, {}, {"a": np.ones(2)})
    p.write_bytes(p.read_bytes().replace(b"MCPO-CHECKPOINT 1", b"MCPO-CHECKPOINT 9", 1))
    with pytest.raises(CheckpointError, match="version"):
        checkpoint.load(p)


def test_trainer_save_load_save_is_byte_identical(tmp_path):
    tr = Trainer(tiny(), 0)
    for _ in range(3):
        tr.run_iteration()
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    tr.save(a)
    tr2 = Trainer(tiny(), 0)
    tr2.load(a)
    tr2.save(b)
    assert a.read_bytes() == b.read_bytes()


def test_memory_order_survives_round_trip(tmp_path):
    tr = Trainer(tiny(), 1)
    for _ in range(2):
        tr.run_iteration()
    assert len(tr.state.memory) == 3
    tr.save(tmp_path / "c.ckpt")
    tr2 = Trainer(tiny(), 1)
    tr2.load(tmp_path / "c.ckpt")
    assert [e.created_at_update for e in tr2.state.memory.entries] == \
           [e.created_at_update for e in tr.state.memory.entries]
    for x, y in zip(tr.state.memory.entries, tr2.state.memory.entries):
        assert np.array_equal(x.params, y.params)
    assert np.array_equal(tr.state.phi, tr2.state.phi)


def test_architecture_mismatch_rejected(tmp_path):
    tr = Trainer(tiny(), 0)
    tr.save(tmp_path / "d.ckpt")
    other = Trainer(tiny(hidden=[16]), 0)
    with pytest.raises(CheckpointError, match="architecture"):
        other.load(tmp_path / "d.ckpt")


def test_algorithm_mismatch_rejected(tmp_path):
    tr = Trainer(tiny(), 0)
    tr.save(tmp_path / "e.ckpt")
    base = tiny(TINY.replace("algorithm: mcpo", "algorithm: kl-fixed\nobjective: {beta: 0.1}")
                .replace("mcpo: {memory_size: 3, write_rule: frequent}", ""))
    with pytest.raises(CheckpointError):
        Trainer(base, 0).load(tmp_path / "e.ckpt")


@pytest.mark.parametrize("algo", ["mcpo", "kl-adaptive"])
def test_resumed_training_is_bit_identical(tmp_path, algo):
    text = TINY
    if algo != "mcpo":
        text = TINY.replace("algorithm: mcpo", "algorithm: kl-adaptive\nobjective: {d_targ: 0.01}") \
                   .replace("mcpo: {memory_size: 3, write_rule: frequent}", "")
    straight = Trainer(tiny(text), 5)
    ref = [straight.run_iteration()[0] for _ in range(4)]
    first = Trainer(tiny(text), 5)
    got = [first.run_iteration()[0] for _ in range(2)]
    first.save(tmp_path / "r.ckpt")
    resumed = Trainer(tiny(text), 5)
    resumed.load(tmp_path / "r.ckpt")
    got += [resumed.run_iteration()[0] for _ in range(2)]
    assert got == ref
    assert np.array_equal(resumed.state.theta, straight.state.theta)
