import pytest
from hypothesis import given
from hypothesis import strategies as st

from omniserve.core import DType, Payload, Request, RequestContext, stream_key
from omniserve.ar_engine import PreprocessStall
from omniserve.reference import (
    FAN_OUT,
    REFERENCE_ENGINES,
    ar_solo_cost,
    mix,
    monolithic_oracle,
    prefill_state,
    talker_codes,
    talker_generate,
    talker_step,
    target_length,
    thinker_generate,
    vocoder_decode,
)

prompts = st.lists(st.integers(1, 255), min_size=1, max_size=64)
seeds = st.integers(0, 2**32 - 1)


def test_mix_and_prompt_one():
    assert mix(0, 1) == 2
    assert target_length(prefill_state([1], 0)) == 3
    out = thinker_generate([1], 0)
    assert out.text_tokens == (43, 144, 217)
    assert out.hidden[0].values == (7, 8, 4, 8, 14, 1, 0, 0)


def test_thinker_matches_handwritten_recurrence():
    h = 12345
    for t in (5, 9, 200):
        h = (h * 1000003 + t + 1) % 2**32
    n = h % 64 + 1
    tokens = []
    for i in range(n):
        h = (h * 1000003 + i + 1) % 2**32
        tokens.append(h % 255 + 1)
    assert list(thinker_generate([5, 9, 200], 12345).text_tokens) == tokens


@given(prompts, seeds)
def test_thinker_bounds_and_purity(p, s):
    a, b = thinker_generate(p, s), thinker_generate(p, s)
    assert a == b
    assert 1 <= len(a.text_tokens) <= 64
    assert all(1 <= t <= 255 for t in a.text_tokens)


def test_talker_examples():
    assert talker_codes(1, [0] * 8) == [7, 8, 9, 10]
    assert talker_codes(255, [15] * 8) == [49, 50, 51, 52]
    with pytest.raises(ValueError):
        talker_codes(0, [0] * 8)


def test_talker_step_reads_stream_and_stalls():
    ctx = RequestContext(1)
    with pytest.raises(PreprocessStall):
        talker_step(ctx, 0)
    ctx.put(stream_key("thinker_hidden", 0), Payload.from_values(DType.U8, [1] + [0] * 8, (1, 9)))
    assert talker_step(ctx, 0) == [7, 8, 9, 10]
    with pytest.raises(PreprocessStall):
        talker_step(ctx, 1)


@given(prompts, seeds)
def test_length_algebra(p, s):
    th = thinker_generate(p, s)
    tk = talker_generate(th)
    wave = vocoder_decode(tk.codec_tokens)
    assert len(tk.codec_tokens) == FAN_OUT * len(th.text_tokens)
    assert all(0 <= c < 64 for c in tk.codec_tokens)
    assert len(wave) == 16 * FAN_OUT * len(th.text_tokens)


@given(st.integers(1, 255), st.lists(st.integers(0, 15), min_size=8, max_size=8), st.integers(0, 7),
       st.integers(1, 15))
def test_hidden_state_sensitivity(tok, hidden, k, delta):
    # perturbing one component (within range) changes every code of that step
    perturbed = list(hidden)
    perturbed[k] = (hidden[k] + delta) % 16
    assert (sum(perturbed) - sum(hidden)) % 64 != 0
    a, b = talker_codes(tok, hidden), talker_codes(tok, perturbed)
    assert all(x != y for x, y in zip(a, b))


def test_oracle_jct_equals_hand_summed_costs():
    out = monolithic_oracle(Request(1, (1,)))
    # thinker: prefill 1 + 3 decodes at 5 ms / 2 workers; talker: prefill 3 + 12 decodes at 2 ms; vocoder 4 x 2.5 ms
    assert out.metrics.done_at == (1 + 3) * 2500 + (3 + 12) * 2000 + 4 * 2500 == 50000
    assert out.codec_tokens == [23, 24, 25, 26, 37, 38, 39, 40, 49, 50, 51, 52]
    assert len(out.waveform) == 4 * 3 * 16


def test_solo_cost_chunks_prefill():
    cfg = REFERENCE_ENGINES["thinker"]
    first, total, prefill = ar_solo_cost(cfg, 130, 5)
    assert prefill == 3 * 0 + cfg.cost_us(64) * 2 + cfg.cost_us(2)
    assert first == prefill + 2500 and total == prefill + 5 * 2500
