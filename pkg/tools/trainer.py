"""Record-to-model training pipeline shared by the CLI and the scenario tests.

Windows are split before anything is fitted, so the scaler only ever sees
training windows and the validation figures stay honest.
"""

import logging

import dataset
import nn
from errors import DataError

logger = logging.getLogger(__name__)


def train_on_records(records, model_settings, hp, val_fraction, *, recurrent=None,
                     paper_exact_cell_update=None, freeze_biases=None):
    """Window, split, scale and train.

    Args:
        records: labelled KPI records (as written by ``gen-dataset``).
        model_settings: a ``config.ModelSettings``.
        hp: ``nn.TrainConfig``; ``hp.seed`` drives the split and the init.
        val_fraction: share of windows held out for validation.
        recurrent / paper_exact_cell_update / freeze_biases: CLI overrides of
            the matching ``model_settings`` fields; ``None`` keeps the setting.

    Returns:
        ``(model, history, train_windows, val_windows)``. The fitted scaler is
        embedded in the model.

    Raises:
        DataError: fewer than two full windows, or a split that leaves one
            side empty.
    """
    if not records:
        raise DataError("empty training set")
    windows = dataset.build_windows(records, model_settings.window_len)
    if len(windows) < 2:
        raise DataError(f"empty training set: {len(windows)} full window(s) of "
                        f"{model_settings.window_len} records")
    train_w, val_w = dataset.split(windows, val_fraction, hp.seed)
    scaler = dataset.fit_scaler([rec for w in train_w for rec in w])
    train_set = dataset.windows_to_arrays(train_w, scaler)
    val_set = dataset.windows_to_arrays(val_w, scaler)
    logger.info("Windows: %d train / %d validation (window_len %d)",
                len(train_w), len(val_w), model_settings.window_len)

    model = nn.init_model(
        seq_dim=len(dataset.SEQ_FEATURES),
        static_dim=len(dataset.STATIC_FEATURES),
        hidden_dim=model_settings.hidden_dim,
        head_layers=model_settings.head_layers,
        recurrent_kind=recurrent or model_settings.recurrent,
        paper_exact_cell_update=(model_settings.paper_exact_cell_update
                                 if paper_exact_cell_update is None else paper_exact_cell_update),
        freeze_biases=model_settings.freeze_biases if freeze_biases is None else freeze_biases,
        activation=model_settings.activation,
        window_len=model_settings.window_len,
        seed=hp.seed,
    )
    model.scaler = scaler
    model, history = nn.train(model, train_set, val_set, hp)
    return model, history, train_w, val_w
