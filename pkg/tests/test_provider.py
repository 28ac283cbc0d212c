import pytest

from orchestrate.errors import NotFoundError, QuotaError, UserError, ValidationError
from orchestrate.provider import (
    ResourceRequest,
    catalog_lookup,
    cluster_totals,
    parse_cluster_config,
)

from conftest import DEMO_CLUSTER, make_cluster


class TestCatalog:
    def test_largest_gpu_instance(self):
        assert catalog_lookup("p3.16xlarge").gpus == 8

    def test_cpu_instance_has_no_gpus(self):
        assert catalog_lookup("c4.xlarge").gpus == 0

    def test_default_p3_8xlarge(self):
        cap = catalog_lookup("p3.8xlarge")
        assert (cap.cpus, cap.gpus) == (32, 4)

    def test_unknown_type_lists_known(self):
        with pytest.raises(NotFoundError, match="p3.16xlarge"):
            catalog_lookup("z9.mega")

    def test_user_catalog_extension(self, root):
        (root.path / "catalog.yml").write_text("x1.custom:\n  cpus: 2\n  gpus: 1\n")
        assert catalog_lookup("x1.custom", root).gpus == 1


class TestConfigValidation:
    def test_missing_pools(self, root):
        with pytest.raises(ValidationError, match="pool"):
            parse_cluster_config({"cloud_provider": "aws-sim", "cluster_name": "x"}, root)

    def test_bad_provider(self, root):
        with pytest.raises(ValidationError, match="cloud_provider"):
            parse_cluster_config({"cloud_provider": "gcp", "cluster_name": "x"}, root)

    def test_min_above_max(self, root):
        with pytest.raises(ValidationError, match="min_nodes"):
            parse_cluster_config(
                {
                    "cloud_provider": "aws-sim",
                    "cluster_name": "x",
                    "cpu": {"instance_type": "c4.xlarge", "min_nodes": 3, "max_nodes": 1},
                },
                root,
            )

    def test_unknown_instance_type_field_path(self, root):
        with pytest.raises(ValidationError, match="gpu.instance_type"):
            parse_cluster_config(
                {
                    "cloud_provider": "aws-sim",
                    "cluster_name": "x",
                    "gpu": {"instance_type": "nope", "min_nodes": 1, "max_nodes": 1},
                },
                root,
            )

    def test_paper_field_names_accepted(self, root):
        # The demo config uses cloud_provider: aws; accepted for compatibility.
        config = dict(DEMO_CLUSTER, cloud_provider="aws")
        parsed = parse_cluster_config(config, root)
        assert parsed.gpu.instance_type == "p3.8xlarge"


class TestCreateCluster:
    def test_demo_cluster_shape(self, provider):
        state = provider.create_cluster(parse_cluster_config(DEMO_CLUSTER, provider.root))
        totals = cluster_totals(state)
        assert totals["nodes"] == 8
        assert totals["gpus"] == 16
        assert totals["cpus"] == 4 * 32 + 4 * 4

    def test_quota(self, provider):
        for i in range(3):
            make_cluster(provider, name=f"c{i}")
        with pytest.raises(QuotaError, match="3"):
            make_cluster(provider, name="c3")

    def test_duplicate_name(self, provider):
        make_cluster(provider, name="dup")
        with pytest.raises(UserError, match="already in use"):
            make_cluster(provider, name="dup")

    def test_empty_pool_valid(self, provider):
        state = make_cluster(
            provider, name="empty", cpu={"instance_type": "c4.xlarge", "min_nodes": 0, "max_nodes": 2}
        )
        assert cluster_totals(state)["nodes"] == 0

    def test_destroy_frees_name_and_quota(self, provider, root):
        for i in range(3):
            make_cluster(provider, name=f"c{i}")
        root.purge_cluster_artifacts("c0", 0.0)
        provider.remove_cluster_dir("c0")
        make_cluster(provider, name="c0")  # succeeds again
        assert len(provider.list_clusters()) == 3

    def test_node_ids_unique(self, demo_cluster):
        ids = [n.id for n in demo_cluster.all_nodes()]
        assert len(ids) == len(set(ids))


class TestScalePool:
    def _cluster(self, provider, lo=1, hi=4):
        return make_cluster(
            provider,
            name="scaly",
            gpu={"instance_type": "p3.2xlarge", "min_nodes": lo, "max_nodes": hi},
        )

    def test_clamp_above_max(self, provider):
        state = self._cluster(provider)
        state = provider.scale_pool(state, "gpu", 9)
        assert len(state.pool("gpu").nodes) == 4

    def test_clamp_below_min(self, provider):
        state = self._cluster(provider)
        state = provider.scale_pool(state, "gpu", 0)
        assert len(state.pool("gpu").nodes) == 1

    def test_min_equals_max_pins_count(self, provider):
        state = make_cluster(
            provider,
            name="pinned",
            gpu={"instance_type": "p3.8xlarge", "min_nodes": 4, "max_nodes": 4},
        )
        for desired in (0, 2, 9):
            state = provider.scale_pool(state, "gpu", desired)
            assert len(state.pool("gpu").nodes) == 4

    def test_shrink_blocked_by_resident_run(self, provider):
        state = self._cluster(provider, lo=0, hi=2)
        state = provider.scale_pool(state, "gpu", 2)
        for node in state.pool("gpu").nodes:
            node.allocate("run-busy", ResourceRequest(gpus=1, cpus=1))
        with pytest.raises(UserError, match="resident runs"):
            provider.scale_pool(state, "gpu", 1)

    def test_shrink_removes_idle_node(self, provider):
        state = self._cluster(provider, lo=0, hi=2)
        state = provider.scale_pool(state, "gpu", 2)
        state.pool("gpu").nodes[0].allocate("busy", ResourceRequest(gpus=1, cpus=1))
        state = provider.scale_pool(state, "gpu", 1)
        remaining = state.pool("gpu").nodes
        assert len(remaining) == 1
        assert "busy" in remaining[0].resident_runs

    def test_bounds_invariant_after_operations(self, provider):
        state = self._cluster(provider, lo=1, hi=3)
        for desired in (5, 0, 2, -1, 3):
            state = provider.scale_pool(state, "gpu", desired)
            pool = state.pool("gpu")
            assert pool.min_nodes <= len(pool.nodes) <= pool.max_nodes


def test_cluster_state_round_trip(provider, demo_cluster):
    demo_cluster.all_nodes()[0].allocate("r1", ResourceRequest(gpus=2, cpus=4))
    provider.save_cluster(demo_cluster)
    loaded = provider.load_cluster(demo_cluster.name)
    node = loaded.all_nodes()[0]
    assert node.allocated_gpus == 2
    assert node.resident_runs == {"r1"}


def test_load_unknown_cluster(provider):
    with pytest.raises(NotFoundError):
        provider.load_cluster("ghost")
