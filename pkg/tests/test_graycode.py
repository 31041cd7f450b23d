import numpy as np
import pytest
from hypothesis import given, strategies as st

from ndfcal.geometry import EyePose
from ndfcal.graycode import (DecodeError, capture_stack, decode, gen_patterns, gray,
                             gray_to_binary, n_bits, read_lut, write_lut, acquire_lut)
from ndfcal.optics import oracle_map


def _lut_errors(lut, pose, optics, intr):
    return np.linalg.norm(lut.u_d - oracle_map(lut.u_e, pose, optics, intr), axis=1)


def test_eight_columns_need_three_bits():
    stack = gen_patterns(8, 2)
    assert stack.bits_x == 3
    assert sum(1 for lab in stack.labels if lab[0] == "x") == 6


def test_gray_of_five():
    assert gray(5) == 0b111
    stack = gen_patterns(8, 2)
    bits = [stack.patterns[stack.index("x", k, "pos")][0, 5] for k in range(3)]
    assert bits == [True, True, True]


@given(st.integers(0, 2**20))
def test_gray_round_trip(n):
    assert gray_to_binary(gray(n)) == n


@given(st.integers(0, 2**12))
def test_neighbouring_codes_differ_by_one_bit(n):
    assert bin(int(gray(n) ^ gray(n + 1))).count("1") == 1


def test_pattern_and_complement_cover_everything():
    stack = gen_patterns(20, 12)
    for i, lab in enumerate(stack.labels):
        if isinstance(lab, tuple) and lab[2] == "pos":
            assert stack.labels[i + 1] == (lab[0], lab[1], "neg")
            assert np.all(stack.patterns[i] ^ stack.patterns[i + 1])


def test_bit_counts_follow_log2():
    assert n_bits(1920) == 11 and n_bits(1080) == 11 and n_bits(1024) == 10
    stack = gen_patterns(1920, 1080)
    assert len(stack) == 2 + 2 * (11 + 11)


def test_tiny_display_rejected():
    with pytest.raises(DecodeError):
        gen_patterns(1, 5)


def test_camera_equal_to_display_decodes_identity():
    stack = gen_patterns(37, 21)
    lut = decode(stack.patterns.astype(float), stack, EyePose())
    assert len(lut) == 37 * 21
    np.testing.assert_array_equal(lut.u_e, lut.u_d)


def test_black_captures_give_empty_lut():
    stack = gen_patterns(16, 8)
    lut = decode(np.zeros((len(stack), 8, 16)), stack, EyePose())
    assert len(lut) == 0


def test_wrong_stack_length_rejected():
    stack = gen_patterns(16, 8)
    with pytest.raises(DecodeError):
        decode(np.zeros((3, 8, 16)), stack, EyePose())


@pytest.mark.parametrize("t", [(0, 0, 0), (6, -6, 6), (-6, 6, -6)])
def test_noiseless_decode_matches_oracle(optics, desk, t):
    pose = EyePose(t=t)
    lut = acquire_lut(pose, optics, desk)
    err = _lut_errors(lut, pose, optics, desk)
    assert np.mean(err <= 1.0) >= 0.99
    assert np.all((lut.u_d >= 0) & (lut.u_d <= [1920, 1080]))


def test_decode_covers_most_of_the_visible_display(optics, desk):
    from ndfcal.optics import dense_gt_map
    pose = EyePose(t=(2, 2, 2))
    lut = acquire_lut(pose, optics, desk)
    assert len(lut) >= 0.9 * dense_gt_map(pose, optics, desk).valid.sum()


def test_noise_keeps_survivors_accurate(optics, desk):
    pose = EyePose(t=(1, -2, 3))
    clean = acquire_lut(pose, optics, desk)
    noisy = acquire_lut(pose, optics, desk, noise=2 / 255, seed=5)
    # borderline bits can flip across the threshold either way, so the size
    # only changes slightly at this noise level
    assert abs(len(noisy) - len(clean)) <= 0.01 * len(clean)
    assert np.all(_lut_errors(noisy, pose, optics, desk) <= 1.5)
    heavy = acquire_lut(pose, optics, desk, noise=20 / 255, seed=5)
    assert len(heavy) < len(clean)


def test_capture_is_seeded(optics, small_camera):
    stack = gen_patterns(1920, 1080)
    a = capture_stack(stack, EyePose(), optics, small_camera, noise=0.01, seed=3)
    b = capture_stack(stack, EyePose(), optics, small_camera, noise=0.01, seed=3)
    np.testing.assert_array_equal(a, b)


def test_lut_file_round_trip(optics, small_camera, tmp_path):
    lut = acquire_lut(EyePose(t=(1, 2, 3)), optics, small_camera)
    write_lut(lut, tmp_path / "v0")
    header = (tmp_path / "v0.csv").read_text().splitlines()[0]
    assert header == "uex,uey,udx,udy"
    back = read_lut(tmp_path / "v0")
    np.testing.assert_array_equal(back.u_e, lut.u_e)
    np.testing.assert_array_equal(back.u_d, lut.u_d)
    assert back.pose == lut.pose


def test_bad_lut_header_rejected(tmp_path):
    (tmp_path / "x.csv").write_text("a,b,c,d\n1,2,3,4\n")
    (tmp_path / "x.json").write_text('{"pose": {"v": [0,0,0], "t": [0,0,0]}}')
    with pytest.raises(DecodeError):
        read_lut(tmp_path / "x")
