import os
import tempfile
import unittest

from services.errors import ConfigError, ParseError
from utils.config_utils import build_config, config_document, load_config


class TestBuildConfig(unittest.TestCase):
    def test_defaults(self):
        # Act
        cfg = build_config()

        # Assert
        self.assertEqual(cfg.seed, 0)
        self.assertEqual(cfg.solver.method, "lshaped")
        self.assertEqual(cfg.policy.slack_weight, 1e3)
        self.assertEqual(cfg.sequential.ci_tol, 0.05)
        self.assertEqual(cfg.evaluation.eps_opt, 5e-4)

    def test_seed_reaches_every_section(self):
        # Act
        cfg = build_config({"seed": 7})

        # Assert
        self.assertEqual((cfg.rhs.seed, cfg.sequential.seed, cfg.solver.sd.seed), (7, 7, 7))

    def test_section_seed_wins(self):
        # Act
        cfg = build_config({"seed": 7, "rhs": {"seed": 3}})

        # Assert
        self.assertEqual(cfg.rhs.seed, 3)
        self.assertEqual(cfg.sequential.seed, 7)

    def test_none_overrides_are_skipped(self):
        # Arrange
        document = {"policy": {"relaxed": True}, "sequential": {"max_rounds": 9}}
        overrides = {"policy": {"relaxed": None}, "sequential": {"max_rounds": 4, "n0": None}}

        # Act
        cfg = build_config(document, overrides)

        # Assert
        self.assertTrue(cfg.policy.relaxed)
        self.assertEqual(cfg.sequential.max_rounds, 4)
        self.assertEqual(cfg.sequential.n0, 2)

    def test_document_is_not_mutated(self):
        # Arrange
        document = {"seed": 5}

        # Act
        build_config(document)

        # Assert
        self.assertEqual(document, {"seed": 5})

    def test_unknown_key(self):
        with self.assertRaises(ConfigError) as context:
            build_config({"policy": {"relax": True}})
        self.assertIn("relax", str(context.exception))

    def test_out_of_range(self):
        with self.assertRaises(ConfigError):
            build_config({"sequential": {"growth": 0.5}})

    def test_resolved_document_validates_again(self):
        # Arrange
        cfg = build_config({"seed": 11, "rhs": {"mode": "latin_hypercube"}})

        # Act
        again = build_config(config_document(cfg))

        # Assert
        self.assertEqual(again, cfg)


class TestLoadConfig(unittest.TestCase):
    def test_missing_path_gives_defaults(self):
        self.assertEqual(load_config(None), build_config())

    def test_non_object(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "config.json")
            with open(path, "w") as handle:
                handle.write("[1, 2]")

            with self.assertRaises(ConfigError):
                load_config(path)

    def test_malformed_json(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "config.json")
            with open(path, "w") as handle:
                handle.write("{seed: 1")

            with self.assertRaises(ParseError):
                load_config(path)


if __name__ == "__main__":
    unittest.main()
