import pytest

from lanechange.errors import InvalidValueError
from lanechange.snapshot import render_snapshot


def test_writes_svg(scene, straight, tmp_path):
    out = render_snapshot(scene, {'baseline': straight}, 0.5, tmp_path / 'snap.svg')
    text = out.read_text()
    assert text.lstrip().startswith('<?xml')
    assert '<svg' in text


def test_same_input_same_bytes(scene, straight, tmp_path):
    first = render_snapshot(scene, {'baseline': straight}, 0.5, tmp_path / 'a.svg')
    second = render_snapshot(scene, {'baseline': straight}, 0.5, tmp_path / 'b.svg')
    assert first.read_bytes() == second.read_bytes()


@pytest.mark.parametrize('time', [-0.1, 1.0, 5.0])
def test_time_outside_window(scene, tmp_path, time):
    with pytest.raises(InvalidValueError):
        render_snapshot(scene, {}, time, tmp_path / 'snap.svg')
