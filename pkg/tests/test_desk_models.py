"""Post-training checks on the desk standard and robust models."""
import numpy as np

from attrib_sens import cli, data, nn

from conftest import DESK_CONFIG


def test_adversarial_gap_and_clean_accuracy_order(desk_run):
    cfg = cli.load_config(DESK_CONFIG)
    images, labels, _ = data.stack(cli.test_split(cfg))
    std = nn.MicroClassifier.load(desk_run.directory / "models" / "standard")
    rob = nn.MicroClassifier.load(desk_run.directory / "models" / "robust")
    pgd = cfg.model("robust").pgd
    clean_std, clean_rob = nn.accuracy(std, images, labels), nn.accuracy(rob, images, labels)
    adv_std = nn.accuracy(std, images[:200], labels[:200], pgd=pgd)
    adv_rob = nn.accuracy(rob, images[:200], labels[:200], pgd=pgd)
    assert adv_rob - adv_std >= 0.10
    assert clean_rob <= clean_std
    assert clean_std > 0.8


def test_desk_models_record_provenance(desk_run):
    for mid in ("standard", "robust"):
        model = nn.MicroClassifier.load(desk_run.directory / "models" / mid)
        assert model.provenance["model_id"] == mid
        assert np.all(model.input_std > 0)
