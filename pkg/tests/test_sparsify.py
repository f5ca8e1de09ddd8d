import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from maser.errors import FormatError, InputError, ParameterError, ProtocolError
from maser.model import Architecture, ModelParams
from maser.protocol.roles import malicious_mask
from maser.sparsify import Mask, SliceSet, apply_mask, gen_mask, make_slices, reconstruct, top_k_count, vote_masks


def random_model(sizes, bias, seed):
    arch = Architecture(tuple(sizes), bias)
    return ModelParams.from_flat(arch, np.random.default_rng(seed).normal(size=arch.param_count))


def mask_of(bits, rnd=0):
    return Mask(np.array(bits, dtype=bool), rnd)


# ----------------------------------------------------------------- gen_mask


def test_top_two_by_magnitude():
    model = ModelParams([np.array([[0.5, -0.2, 0.1, 0.9]])])
    assert list(gen_mask(model, 0.5).bits) == [1, 0, 0, 1]


def test_kappa_one_keeps_everything():
    model = random_model((4, 3, 2), True, 0)
    assert gen_mask(model, 1.0).popcount() == model.arch.param_count


def test_ties_go_to_lower_index():
    model = ModelParams([np.array([[1.0, -1.0, 1.0, 0.5]])])
    assert list(gen_mask(model, 0.5).bits) == [1, 1, 0, 0]


def test_sort_oracle_on_1000_weights():
    model = ModelParams([np.random.default_rng(3).normal(size=(40, 25))])
    mask = gen_mask(model, 0.1)
    w = np.abs(model.flatten())
    assert mask.popcount() == 100
    assert w[mask.bits].min() >= w[~mask.bits].max()


@pytest.mark.parametrize("kappa", [0.05, 0.1, 0.5, 0.9, 1.0])
@pytest.mark.parametrize("seed", range(3))
def test_exact_weight_count_and_biases_kept(kappa, seed):
    model = random_model((13, 7, 3), True, seed)
    arch = model.arch
    mask = gen_mask(model, kappa)
    weights = arch.weight_positions
    assert mask.bits[weights].sum() == min(math.ceil(kappa * arch.weight_count), arch.weight_count)
    assert mask.bits[~weights].all()


def test_top_k_count_float_noise():
    assert top_k_count(0.3, 10) == 3
    assert top_k_count(0.1, 1000) == 100
    assert top_k_count(0.05, 101) == 6


@pytest.mark.parametrize("kappa", [0.0, -0.1, 1.5])
def test_bad_kappa(kappa):
    with pytest.raises(ParameterError):
        gen_mask(random_model((2, 2), True, 0), kappa)


# --------------------------------------------------------------------- vote


def test_vote_thresholds():
    five = [mask_of([1]), mask_of([1]), mask_of([1]), mask_of([0]), mask_of([0])]
    assert vote_masks(five).bits[0]
    assert not vote_masks(five[2:] + [mask_of([0])]).bits[0]
    four = [mask_of([1]), mask_of([1]), mask_of([0]), mask_of([0])]
    assert vote_masks(four).bits[0]  # exactly half is kept


def test_vote_errors():
    with pytest.raises(InputError):
        vote_masks([])
    with pytest.raises(InputError):
        vote_masks([mask_of([1, 0]), mask_of([1])])


def test_honest_majority_dominates_exhaustively():
    """Every honest bit value against every combination of two adversarial bits."""
    for h, a1, a2 in itertools.product((0, 1), repeat=3):
        out = vote_masks([mask_of([h])] * 3 + [mask_of([a1]), mask_of([a2])])
        assert out.bits[0] == bool(h)
    # and over random patterns with each adversarial strategy
    rng = np.random.default_rng(0)
    for _ in range(50):
        honest = mask_of(rng.integers(0, 2, 64))
        for behavior in ("random_mask", "all_ones_mask", "inverted_mask"):
            bad = [malicious_mask(behavior, honest, rng) for _ in range(2)]
            assert vote_masks([honest] * 3 + bad) == honest


def test_vote_where_honest_clients_agree():
    """Honest clients with different masks: where all three agree, the vote follows them."""
    rng = np.random.default_rng(1)
    for _ in range(100):
        honest = [mask_of(rng.integers(0, 2, 32)) for _ in range(3)]
        bad = [mask_of(rng.integers(0, 2, 32)) for _ in range(2)]
        out = vote_masks(honest + bad).bits
        stack = np.array([h.bits for h in honest])
        agree = stack.all(axis=0) | (~stack).all(axis=0)
        np.testing.assert_array_equal(out[agree], stack[0][agree])


@given(st.lists(st.lists(st.booleans(), min_size=12, max_size=12), min_size=1, max_size=7), st.randoms())
def test_vote_permutation_invariant_and_monotone(rows, rnd):
    masks = [mask_of(r) for r in rows]
    out = vote_masks(masks)
    shuffled = masks[:]
    rnd.shuffle(shuffled)
    assert vote_masks(shuffled) == out
    # turning any 0 into a 1 never clears an output bit
    i, k = rnd.randrange(len(rows)), rnd.randrange(12)
    bumped = [r[:] for r in rows]
    bumped[i][k] = True
    assert np.all(vote_masks([mask_of(r) for r in bumped]).bits >= out.bits)


@given(st.integers(1, 9), st.integers(0, 2**32 - 1))
def test_strict_majority_dominance(m, seed):
    rng = np.random.default_rng(seed)
    honest = mask_of(rng.integers(0, 2, 40))
    k = m // 2 + 1
    others = [mask_of(rng.integers(0, 2, 40)) for _ in range(m - k)]
    assert vote_masks([honest] * k + others) == honest


def test_malicious_behaviors():
    ones = mask_of([1] * 8)
    assert (~ones).popcount() == 0
    assert malicious_mask("inverted_mask", ones, None).popcount() == 0
    assert malicious_mask("all_ones_mask", mask_of([0] * 8), None).popcount() == 8
    bits = malicious_mask("random_mask", mask_of([0] * 20000), np.random.default_rng(0))
    assert abs(bits.popcount() - 10000) <= 0.05 * 10000
    with pytest.raises(ValueError):
        malicious_mask("flip", ones, None)


# ------------------------------------------------------------ apply / slice


def test_apply_mask_examples():
    model = random_model((3, 4), True, 1)
    n = model.arch.param_count
    assert apply_mask(model, mask_of([1] * n)) == model
    assert np.all(apply_mask(model, mask_of([0] * n)).flatten() == 0)
    mask = mask_of(np.random.default_rng(2).integers(0, 2, n))
    once = apply_mask(model, mask)
    assert apply_mask(once, mask) == once
    with pytest.raises(InputError):
        apply_mask(model, mask_of([1] * (n + 1)))


def test_slice_arithmetic_example():
    arch = Architecture((100, 100), bias=False)
    model = ModelParams.from_flat(arch, np.arange(1, 10001, dtype=float))
    slices = make_slices(model, mask_of([1] * 10000), 4096)
    assert len(slices) == 3
    assert np.count_nonzero(slices.slices[-1]) == 1808
    assert np.all(slices.slices[-1][1808:] == 0)


def test_slice_count_grows_with_threshold():
    # ConvNet-scale weight count: 10% fits one 4096-slot slice, 90% needs ten
    arch = Architecture((4, 10000), bias=False)
    model = ModelParams.from_flat(arch, np.random.default_rng(0).normal(size=40000))
    assert len(make_slices(model, gen_mask(model, 0.1), 4096)) == 1
    assert len(make_slices(model, gen_mask(model, 0.9), 4096)) == 9
    assert len(make_slices(model, gen_mask(model, 1.0), 4096)) == 10


def test_hand_placement_toy_layer():
    arch = Architecture((3, 3), bias=False)
    model = ModelParams.from_flat(arch, np.arange(1.0, 10.0))
    bits = [1, 0, 0, 0, 1, 1, 0, 0, 1]
    mask = mask_of(bits)
    slices = make_slices(model, mask, 8)
    assert len(slices) == 1
    assert list(slices.slices[0]) == [1, 5, 6, 9, 0, 0, 0, 0]
    doubled = SliceSet((slices.slices[0] * 2,), 4, mask.digest())
    out = reconstruct(doubled, mask, arch)
    np.testing.assert_array_equal(out.weights[0], [[2, 0, 0], [0, 10, 12], [0, 0, 18]])


def test_zero_slices_reconstruct_to_zero_model():
    arch = Architecture((3, 2), bias=True)
    mask = mask_of([1] * arch.param_count)
    out = reconstruct(SliceSet((np.zeros(16),), arch.param_count, mask.digest()), mask, arch)
    assert np.all(out.flatten() == 0)


@pytest.mark.parametrize("slots", [8, 512, 4096])
@pytest.mark.parametrize("seed", range(3))
def test_slice_round_trip(slots, seed):
    model = random_model((30, 20, 5), True, seed)
    mask = mask_of(np.random.default_rng(seed).random(model.arch.param_count) < 0.3)
    slices = make_slices(model, mask, slots)
    assert len(slices) == math.ceil(mask.popcount() / slots)
    assert all(s.size == slots for s in slices.slices)
    assert slices.payload().size == mask.popcount()
    assert reconstruct(slices, mask, model.arch) == apply_mask(model, mask)


def test_reconstruct_rejects_stale_mask():
    model = random_model((4, 3), True, 0)
    mask = gen_mask(model, 0.5)
    slices = make_slices(model, mask, 8)
    other = gen_mask(model, 0.25)
    with pytest.raises(ProtocolError):
        reconstruct(slices, other, model.arch)
    with pytest.raises(ProtocolError):
        reconstruct(SliceSet(slices.slices, slices.kept_count - 1, slices.mask_digest), mask, model.arch)
    with pytest.raises(ParameterError):
        make_slices(model, mask, 0)


# --------------------------------------------------------------------- wire


def test_mask_wire_format():
    mask = mask_of([1, 0, 1, 1, 0, 0, 0, 0, 1], rnd=7)
    data = mask.to_bytes()
    assert data[:4] == (9).to_bytes(4, "little") and data[4:8] == (7).to_bytes(4, "little")
    assert data[8:] == bytes([0b00001101, 0b00000001])
    assert Mask.from_bytes(data) == mask
    with pytest.raises(FormatError):
        Mask.from_bytes(data[:-1])
    with pytest.raises(FormatError):
        Mask.from_bytes(data[:-1] + bytes([0b10000001]))
