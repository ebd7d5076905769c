import numpy as np
import pytest

from conftest import small_config
from lapo_lab.chunkgrid import OBS_DIM, ChunkGridEnv, TaskSpec, scripted_expert
from lapo_lab.errors import FormatError
from lapo_lab.io.formats import (
    DumpedStep,
    DumpedTrajectory,
    decode_cache,
    decode_checkpoint,
    decode_demos,
    decode_rollouts,
    encode_cache,
    encode_checkpoint,
    encode_demos,
    encode_rollouts,
    read_checkpoint,
    write_checkpoint,
)
from lapo_lab.policy import LatentMode, PolicyParams, act, init_params


def _make_demos():
    return [scripted_expert(TaskSpec("reach", v), seed=v, horizon=8) for v in range(3)]


def test_demos_survive_encoding():
    demos = _make_demos()
    back = decode_demos(encode_demos(demos), horizon=8, action_dim=3)
    assert len(back) == 3
    for a, b in zip(demos, back):
        assert (a.suite, a.variant) == (b.suite, b.variant)
        assert np.array_equal(a.observations, b.observations)
        assert np.array_equal(a.actions, b.actions)


def test_truncated_demo_file_reports_offset():
    data = encode_demos(_make_demos())
    cut = len(data) - 5
    with pytest.raises(FormatError) as exc:
        decode_demos(data[:cut], horizon=8, action_dim=3)
    assert 0 < exc.value.offset <= cut


def test_bad_magic_is_rejected():
    data = encode_demos(_make_demos())
    with pytest.raises(FormatError) as exc:
        decode_demos(b"XXXXXXXX" + data[8:], horizon=8, action_dim=3)
    assert exc.value.offset == 0


def test_trailing_bytes_are_rejected():
    data = encode_demos(_make_demos())
    with pytest.raises(FormatError) as exc:
        decode_demos(data + b"\x00\x00", horizon=8, action_dim=3)
    assert exc.value.offset == len(data)


def test_unknown_suite_id_is_rejected():
    data = bytearray(encode_demos(_make_demos()))
    data[12:16] = (7).to_bytes(4, "little")
    with pytest.raises(FormatError) as exc:
        decode_demos(bytes(data), horizon=8, action_dim=3)
    assert exc.value.offset == 12


def test_empty_cache():
    assert decode_cache(encode_cache([]), k=4) == []


def test_cache_records_keep_keys():
    records = [((0, 0, 1), np.arange(4, dtype=np.float32)), ((1, 2, 3), -np.ones(4, dtype=np.float32))]
    back = decode_cache(encode_cache(records), k=4)
    assert [key for key, _ in back] == [(0, 0, 1), (1, 2, 3)]
    assert np.array_equal(back[1][1], records[1][1])


def test_checkpoint_preserves_policy_outputs(tmp_path):
    cfg = small_config()
    params = init_params(cfg, seed=3)
    params.step = 17
    path = tmp_path / "ckpt" / "policy.ckpt"
    write_checkpoint(path, params.to_groups())
    loaded = PolicyParams.from_groups(read_checkpoint(path))
    assert loaded.step == 17
    assert loaded.digest() == params.digest()

    obs = ChunkGridEnv(TaskSpec("reach", 1, n_variants=cfg.n_variants)).reset(0)
    mode = LatentMode.fixed(4)
    a = act(params.tensors, cfg, obs, 1, mode, temperature=0.0)
    b = act(loaded.tensors, cfg, obs, 1, mode, temperature=0.0)
    assert np.array_equal(a.tokens, b.tokens)
    assert np.array_equal(a.latents, b.latents)
    assert a.value == b.value


def test_checkpoint_version_is_checked():
    data = bytearray(encode_checkpoint({"w": np.ones((2, 2), dtype=np.float32)}))
    data[8:12] = (9).to_bytes(4, "little")
    with pytest.raises(FormatError) as exc:
        decode_checkpoint(bytes(data))
    assert exc.value.offset == 8


def test_rollout_dump_keeps_fixed_and_adaptive_steps():
    d, n_tokens = 4, 6
    steps = [
        DumpedStep(np.zeros(OBS_DIM, np.float32), np.ones((2, d), np.float32), 0, np.arange(n_tokens), -3.5, -0.7, 0.2, 0.0, False),
        DumpedStep(np.ones(OBS_DIM, np.float32), np.zeros((0, d), np.float32), -1, np.full(n_tokens, 255), -1.0, 0.0, 0.1, 5.0, True),
    ]
    trajs, d_back, n_back = decode_rollouts(encode_rollouts([DumpedTrajectory("sequence", 2, steps)], d, n_tokens))
    assert (d_back, n_back) == (d, n_tokens)
    assert trajs[0].suite == "sequence" and trajs[0].variant == 2
    first, second = trajs[0].steps
    assert first.latents.shape == (2, d) and first.length_index == 0
    assert second.latents.shape == (0, d) and second.length_index == -1
    assert second.done and second.reward == 5.0
    assert list(second.tokens) == [255] * n_tokens
    assert first.logp_a == pytest.approx(-3.5)
