import numpy
import pytest

from physcapture.physics import analytic_sdf
from physcapture.physics import SceneGeometry
from physcapture.physics.scene import analytic_sdf_gradient
from physcapture.physics.scene import Box
from physcapture.physics.scene import Heightfield
from physcapture.physics.scene import Plane
from tests import output_directory


def test_plane_distance():
    scene = SceneGeometry.flat_ground()

    assert analytic_sdf(scene, [0, 0, 0.5]) == 0.5
    assert analytic_sdf(scene, [3, -2, -0.25]) == -0.25
    assert numpy.allclose(analytic_sdf_gradient(scene, [1, 1, 1]), [0, 0, 1])


def test_box_face():
    scene = SceneGeometry([Box((0.0, 0.0, 0.0), (0.5, 0.5, 0.5))])

    assert analytic_sdf(scene, [0.5, 0.1, -0.2]) == 0
    assert analytic_sdf(scene, [0.0, 0.0, 0.0]) == -0.5
    assert numpy.allclose(analytic_sdf_gradient(scene, [0.1, 0.0, 0.4]), [0, 0, 1])


def test_box_corner():
    box = Box((0.0, 0.0, 0.0), (0.5, 0.5, 0.5))
    scene = SceneGeometry([box])
    point = numpy.array([0.7, 0.8, 0.6])

    # dense samples of the six faces
    samples = numpy.linspace(-0.5, 0.5, 201)
    u, v = (values.ravel() for values in numpy.meshgrid(samples, samples))
    faces = []
    for axis in range(3):
        for side in (-0.5, 0.5):
            face = numpy.empty((len(u), 3))
            face[:, axis] = side
            face[:, [other for other in range(3) if other != axis]] = numpy.stack(
                [u, v], axis=1
            )
            faces.append(face)
    oracle = numpy.linalg.norm(numpy.concatenate(faces) - point, axis=1).min()

    distance = analytic_sdf(scene, point)

    assert numpy.isclose(distance, numpy.sqrt(0.2**2 + 0.3**2 + 0.1**2))
    assert abs(distance - oracle) < 1e-3


def test_scene_union():
    scene = SceneGeometry.staircase(steps=3, rise=0.1, run=0.3, start=-0.25)

    # above the second step
    assert numpy.isclose(analytic_sdf(scene, [0.0, -0.25 - 0.45, 0.3]), 0.1)
    # in front of the stairs
    assert numpy.isclose(analytic_sdf(scene, [0.0, 0.5, 0.2]), 0.2)
    assert len(scene.primitives) == 4


def test_heightfield():
    flat = Heightfield((-1.0, -1.0), 0.5, [[0.2] * 5] * 5)
    ramp = Heightfield((0.0, 0.0), 1.0, [[0.0, 0.0], [1.0, 1.0]])

    assert numpy.isclose(flat.sdf(numpy.array([0.0, 0.0, 1.0])), 0.8)
    assert numpy.isclose(ramp.sdf(numpy.array([0.5, 0.5, 0.5])), 0.0)
    assert numpy.allclose(
        ramp.gradient(numpy.array([0.5, 0.5, 1.0])), [-numpy.sqrt(0.5), 0, numpy.sqrt(0.5)]
    )


def test_scene_invalid():
    with pytest.raises(ValueError):
        SceneGeometry([])

    with pytest.raises(ValueError):
        Plane((0.0, 0.0, 0.0))

    with pytest.raises(ValueError):
        Box((0.0, 0.0, 0.0), (0.5, 0.0, 0.5))

    with pytest.raises(ValueError):
        analytic_sdf(SceneGeometry.flat_ground(), [0, 0, numpy.nan])


def test_scene_file():
    output = output_directory("test_scene_file")
    scene = SceneGeometry(
        list(SceneGeometry.staircase().primitives)
        + [Heightfield((2.0, 2.0), 0.25, [[0.0, 0.1], [0.2, 0.3]])]
    )

    scene.to_file(output / "scene.toml", overwrite=True)
    read = SceneGeometry.from_file(output / "scene.toml")

    assert read.primitives == scene.primitives

    with pytest.raises(FileExistsError):
        scene.to_file(output / "scene.toml")

    with pytest.raises(FileNotFoundError):
        SceneGeometry.from_file(output / "nonexistent.toml")
