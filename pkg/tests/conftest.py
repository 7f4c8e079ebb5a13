"""
测试公共夹具
小尺寸合成数据、闭式可解的线性桩模型以及小卷积网络
"""
import numpy as np
import pytest

from src.attack import AttackConfig, TransformSupport, TransparentConfig
from src.batch import ExperimentContext
from src.model import LINEAR_ARCHITECTURE, Dataset, LayerSpec, Model, build_model, generate_synthetic

IMAGE_SIZE = 16
PATCH_SIZE = 8


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="运行完整规模的实验测试")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="需要 --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_linear_stub(size: int = IMAGE_SIZE) -> Model:
    """
    两类线性模型：类别 0 的 logit 恒为 0，类别 1 的 logit 为像素均值 − 0.5

    像素均值大于 0.5 时预测为类别 1。
    """
    features = 3 * size * size
    weight = np.zeros((features, 2))
    weight[:, 1] = 1.0 / features
    bias = np.array([0.0, -0.5])
    return Model(LINEAR_ARCHITECTURE, {"1.dense.weight": weight, "1.dense.bias": bias}, 2, (3, size, size))


def make_random_linear(num_classes: int = 3, size: int = 8, seed: int = 0) -> Model:
    rng = np.random.default_rng(seed)
    features = 3 * size * size
    params = {
        "1.dense.weight": rng.normal(0.0, 0.1, size=(features, num_classes)),
        "1.dense.bias": rng.normal(0.0, 0.1, size=num_classes),
    }
    return Model(LINEAR_ARCHITECTURE, params, num_classes, (3, size, size))


def dark_dataset(n: int = 6, size: int = IMAGE_SIZE, level: float = 0.1, split: str = "test") -> Dataset:
    """全部为类别 0 的常数暗图"""
    return Dataset(images=np.full((n, 3, size, size), level), labels=np.zeros(n, dtype=np.int64),
                   split=split, num_classes=2)


@pytest.fixture
def linear_stub() -> Model:
    return make_linear_stub()


@pytest.fixture
def random_linear() -> Model:
    return make_random_linear()


@pytest.fixture
def tiny_conv_model() -> Model:
    architecture = (
        LayerSpec("conv", 2),
        LayerSpec("relu"),
        LayerSpec("maxpool"),
        LayerSpec("flatten"),
        LayerSpec("dense"),
    )
    return build_model(architecture, (3, 4, 4), num_classes=3, seed=1, dtype=np.float64)


@pytest.fixture
def tiny_dataset() -> Dataset:
    return generate_synthetic(60, seed=3, num_classes=3, image_size=IMAGE_SIZE)


@pytest.fixture
def dark_pool() -> Dataset:
    return dark_dataset(8, split="train")


@pytest.fixture
def dark_test() -> Dataset:
    return dark_dataset(4)


@pytest.fixture
def stub_context(tmp_path, linear_stub, dark_pool, dark_test) -> ExperimentContext:
    """线性桩模型上的小规模实验环境：两次迭代、每张图像两个变换"""
    support = TransformSupport(theta_max=0.0, scale_low=0.5, scale_high=0.5)
    attack = AttackConfig(iterations=2, batch_images=2, transforms_per_image=2, patch_size=PATCH_SIZE,
                          support=support, dtype="float64")
    transparent = TransparentConfig(iterations=2, learning_rate=0.0, batch_images=2, transforms_per_image=2,
                                    patch_size=PATCH_SIZE, support=support, control_iterations=2, dtype="float64")
    return ExperimentContext(
        model=linear_stub,
        pool=dark_pool,
        test=dark_test,
        out_dir=tmp_path / "out",
        attack=attack,
        transparent=transparent,
        evaluation={"test_images": 4, "transform_samples": 2, "angle_bins": 4, "scale_bins": 2},
        experiments={
            "targets": [1],
            "scale_grid": [0.3],
            "scale_min": 0.25,
            "scale_max": 0.5,
            "rotation_scale": 0.4,
            "theta_grid_steps": 2,
            "joint_scale_grid": [0.3],
            "joint_theta_grid": [0.0],
        },
        master_seed=2020,
        workers=2,
    )
