"""Configuration handling: defaults, validation, overrides, round-trips."""

import pytest
import yaml

from dynslam.config import (DatasetCfg, MeshCfg, MlpCfg, RunConfig,
                            apply_overrides, config_from_dict, config_to_dict,
                            dump_config, grid_from_dict, intrinsics_from_dict,
                            load_config, system_config)
from dynslam.errors import ConfigError


class TestDefaults:
    def test_empty_mapping_is_a_complete_config(self):
        assert config_from_dict({}) == RunConfig()
        assert config_from_dict(None) == RunConfig()

    def test_default_values_reach_the_sections(self):
        cfg = RunConfig()
        assert cfg.tracker.kf_interval == 5
        assert cfg.intrinsics.width == 640
        assert cfg.grid.table_size == 2**14
        assert (cfg.seed, cfg.threads, cfg.out_dir) == (0, 1, "out")

    @pytest.mark.parametrize("kwargs", [
        {"kind": "bonn"},
        {"max_dt": 0.0},
        {"max_dt": -1.0},
    ])
    def test_dataset_section_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            DatasetCfg(**kwargs)

    def test_mlp_and_mesh_sections_reject_bad_values(self):
        with pytest.raises(ValueError):
            MlpCfg(hidden=0)
        with pytest.raises(ValueError):
            MeshCfg(voxel_size=0.0)
        with pytest.raises(ValueError):
            MeshCfg(cull_margin=-0.1)


class TestValidation:
    def test_unknown_top_level_key_is_named(self):
        with pytest.raises(ConfigError, match="colour"):
            config_from_dict({"colour": 3})

    def test_unknown_section_key_carries_the_dotted_path(self):
        with pytest.raises(ConfigError, match="tracker.warp_iters"):
            config_from_dict({"tracker": {"warp_iters": 9}})

    def test_wrong_scalar_type_carries_the_dotted_path(self):
        with pytest.raises(ConfigError, match="tracker.track_iters"):
            config_from_dict({"tracker": {"track_iters": "many"}})

    def test_bool_is_not_an_integer(self):
        with pytest.raises(ConfigError, match="threads"):
            config_from_dict({"threads": True})

    def test_int_promotes_to_float_fields(self):
        cfg = config_from_dict({"truncation": {"tr": 1}})
        assert cfg.truncation.tr == 1.0
        assert isinstance(cfg.truncation.tr, float)

    def test_bounds_lists_become_tuples(self):
        cfg = config_from_dict({"grid": {"bounds_min": [-1, -1, -1]}})
        assert cfg.grid.bounds_min == (-1.0, -1.0, -1.0)

    def test_bounds_of_wrong_length_are_rejected(self):
        with pytest.raises(ConfigError, match="grid.bounds_min"):
            config_from_dict({"grid": {"bounds_min": [-1, -1]}})

    def test_section_must_be_a_mapping(self):
        with pytest.raises(ConfigError, match="tracker"):
            config_from_dict({"tracker": 7})

    def test_section_value_errors_become_config_errors(self):
        with pytest.raises(ConfigError, match=r"\[tracker\]"):
            config_from_dict({"tracker": {"kf_interval": 0}})

    @pytest.mark.parametrize("raw", [{"threads": 0}, {"seed": -1}])
    def test_scalar_ranges(self, raw):
        with pytest.raises(ConfigError):
            config_from_dict(raw)


class TestRoundTrip:
    def test_dump_then_load_preserves_the_config(self):
        cfg = config_from_dict({"tracker": {"track_iters": 7},
                                "grid": {"n_levels": 4, "r_max": 64},
                                "seed": 3})
        text = dump_config(cfg)
        assert config_from_dict(yaml.safe_load(text)) == cfg

    def test_dump_is_byte_stable(self):
        # the resolved-config echo must reproduce itself exactly
        first = dump_config(RunConfig())
        again = dump_config(config_from_dict(yaml.safe_load(first)))
        assert again == first

    def test_dump_lists_every_section(self):
        d = yaml.safe_load(dump_config(RunConfig()))
        assert set(d) >= {"dataset", "intrinsics", "grid", "mlp", "tracker",
                          "weights", "truncation", "edge", "mask", "mesh",
                          "seed", "threads", "out_dir"}

    def test_load_config_reads_a_file(self, tmp_path):
        p = tmp_path / "run.yaml"
        p.write_text("tracker: {kf_interval: 3}\nseed: 9\n")
        cfg = load_config(p)
        assert cfg.tracker.kf_interval == 3 and cfg.seed == 9

    def test_missing_config_file_names_the_path(self, tmp_path):
        with pytest.raises(ConfigError, match="nope.yaml"):
            load_config(tmp_path / "nope.yaml")

    def test_unparseable_yaml_is_a_config_error(self, tmp_path):
        p = tmp_path / "bad.yaml"
        p.write_text("tracker: [unbalanced\n")
        with pytest.raises(ConfigError):
            load_config(p)


class TestOverrides:
    def test_dotted_override_wins_over_the_base(self):
        base = config_from_dict({"tracker": {"track_iters": 5}})
        cfg = apply_overrides(base, ["tracker.track_iters=9"])
        assert cfg.tracker.track_iters == 9
        # untouched fields survive
        assert cfg.tracker.kf_interval == base.tracker.kf_interval

    def test_top_level_scalars_and_strings(self):
        cfg = apply_overrides(RunConfig(), ["seed=4", "out_dir=runs/x",
                                            "tracker.tracking_mode=render_only"])
        assert cfg.seed == 4
        assert cfg.out_dir == "runs/x"
        assert cfg.tracker.tracking_mode == "render_only"

    def test_list_values_parse_as_yaml(self):
        cfg = apply_overrides(RunConfig(), ["grid.bounds_min=[-1,-1,-1]"])
        assert cfg.grid.bounds_min == (-1.0, -1.0, -1.0)

    def test_no_equals_sign_is_rejected(self):
        with pytest.raises(ConfigError, match="section.key=value"):
            apply_overrides(RunConfig(), ["tracker.track_iters"])

    def test_unknown_section_is_rejected(self):
        with pytest.raises(ConfigError, match="warp"):
            apply_overrides(RunConfig(), ["warp.iters=3"])

    def test_unknown_field_is_rejected(self):
        with pytest.raises(ConfigError, match="tracker.bogus"):
            apply_overrides(RunConfig(), ["tracker.bogus=3"])

    def test_override_values_are_validated(self):
        with pytest.raises(ConfigError, match=r"\[tracker\]"):
            apply_overrides(RunConfig(), ["tracker.kf_interval=0"])


class TestConversions:
    def test_system_config_carries_every_section(self):
        cfg = config_from_dict({"mlp": {"hidden": 16, "h_dim": 8},
                                "seed": 5, "threads": 2})
        sysc = system_config(cfg)
        assert sysc.tracker == cfg.tracker
        assert sysc.grid == cfg.grid
        assert sysc.weights == cfg.weights
        assert sysc.truncation == cfg.truncation
        assert sysc.edge == cfg.edge
        assert sysc.mask == cfg.mask
        assert (sysc.mlp_hidden, sysc.mlp_h_dim) == (16, 8)
        assert (sysc.seed, sysc.threads) == (5, 2)

    def test_intrinsics_from_dict_matches_the_dataset_schema(self):
        intr = intrinsics_from_dict({"fx": 80.0, "fy": 80.0, "cx": 47.5,
                                     "cy": 35.5, "width": 96, "height": 72,
                                     "depth_scale": 5000.0})
        assert intr.width == 96 and intr.fx == 80.0

    def test_grid_from_dict_restores_tuple_bounds(self):
        d = config_to_dict(RunConfig())["grid"]
        assert isinstance(d["bounds_min"], list)  # JSON/YAML carry lists
        grid = grid_from_dict(d)
        assert grid == RunConfig().grid

    def test_config_to_dict_is_pure_builtins(self):
        def check(node):
            if isinstance(node, dict):
                for v in node.values():
                    check(v)
            elif isinstance(node, list):
                for v in node:
                    check(v)
            else:
                assert isinstance(node, (int, float, str, bool))
        check(config_to_dict(RunConfig()))
