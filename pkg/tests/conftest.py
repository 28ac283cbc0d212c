import pytest

from orchestrate.controller import Controller, ControllerConfig
from orchestrate.provider import Provider, parse_cluster_config
from orchestrate.store import init_home


@pytest.fixture
def root(tmp_path):
    return init_home(tmp_path / "home")


@pytest.fixture
def provider(root):
    return Provider(root)


DEMO_CLUSTER = {
    "cloud_provider": "aws-sim",
    "cluster_name": "orchestrate-cluster",
    "gpu": {"instance_type": "p3.8xlarge", "min_nodes": 4, "max_nodes": 4},
    "cpu": {"instance_type": "c4.xlarge", "min_nodes": 4, "max_nodes": 4},
}


def make_cluster(provider, name="test-cluster", gpu=None, cpu=None):
    config = {"cloud_provider": "aws-sim", "cluster_name": name}
    if gpu:
        config["gpu"] = gpu
    if cpu:
        config["cpu"] = cpu
    if not gpu and not cpu:
        config["cpu"] = {"instance_type": "c4.xlarge", "min_nodes": 2, "max_nodes": 2}
    return provider.create_cluster(parse_cluster_config(config, provider.root))


@pytest.fixture
def demo_cluster(provider):
    return provider.create_cluster(parse_cluster_config(DEMO_CLUSTER, provider.root))


@pytest.fixture
def controller_factory(root, provider):
    controllers = []

    def make(cluster_name, **config_kwargs):
        config_kwargs.setdefault("grace_period", 0.5)
        ctl = Controller(root, cluster_name, ControllerConfig(**config_kwargs))
        controllers.append(ctl)
        return ctl

    yield make
    for ctl in controllers:
        ctl.shutdown()


def wait_until(predicate, timeout=10.0, interval=0.01):
    import time

    deadline = time.time() + timeout
    while time.time() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return False


def synthetic_experiment(**overrides):
    config = {
        "name": "synthetic",
        "strategy": "random",
        "observation_budget": 10,
        "parallel_bandwidth": 2,
        "seed": 7,
        "parameters": [{"name": "x", "kind": "double", "min": 0.0, "max": 1.0}],
        "resources": {"gpus": 0, "cpus": 1},
        "synthetic": {
            "objective": "negated_quadratic",
            "params": {"center": {"x": 0.3}},
            "simulated_duration": 0.01,
        },
    }
    config.update(overrides)
    return config
