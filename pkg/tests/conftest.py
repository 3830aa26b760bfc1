import sys
from pathlib import Path

import numpy as np
import pytest

# Same path setup as the entry scripts: tools/ has no package __init__.
TOOLS_DIR = Path(__file__).resolve().parent.parent / "tools"
sys.path.insert(0, str(TOOLS_DIR))

from mobility import DeviceType, Pattern, UeProfile, UeState  # noqa: E402
from network import (                                         # noqa: E402
    CellSite,
    MeasurementSample,
    NetworkAttributes,
    RadioConfig,
    Tech,
)

REPO_ROOT = TOOLS_DIR.parent


@pytest.fixture
def repo_root():
    return REPO_ROOT


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def quiet_radio():
    """No shadowing, no fading: measurements are pure geometry."""
    return RadioConfig(shadowing_sigma_db=0.0, fast_fading=False)


@pytest.fixture
def make_cell():
    def factory(cell_id, position=(0.0, 0.0), earfcn=1300, tech=Tech.ENODEB_4G,
                enb_id=None, band="B3", tx_power_dbm=46.0, backhaul_mbps=1000.0,
                max_users=200):
        return CellSite(
            cell_id=cell_id, enb_id=enb_id if enb_id is not None else 100 + cell_id,
            pci=cell_id % 504, tac=1, mcc=310, mnc=260, band=band, earfcn=earfcn,
            tech=tech, position=tuple(position), tx_power_dbm=tx_power_dbm,
            bandwidth_mhz=10.0, backhaul_mbps=backhaul_mbps, max_users=max_users,
        )
    return factory


@pytest.fixture
def make_record(make_cell):
    """Build a KPI record from plain numbers.

    ``neighbors`` is a list of (cell_id, rsrp_dbm) or (cell_id, rsrp_dbm, alarm_code).
    """
    import dataset
    from network import Severity

    def factory(serving_rsrp=-90.0, neighbors=(), serving_alarm=0, t=0.0, ue_id=1,
                serving_sinr=10.0):
        cells = {1: make_cell(1)}
        attrs = {1: NetworkAttributes(alarm=Severity(serving_alarm))}
        nbrs = []
        for entry in neighbors:
            cid, rsrp = entry[0], entry[1]
            alarm = entry[2] if len(entry) > 2 else 0
            cells[cid] = make_cell(cid, position=(100.0 * cid, 0.0))
            attrs[cid] = NetworkAttributes(alarm=Severity(alarm))
            nbrs.append((cid, MeasurementSample(cid, rsrp, -10.0, -60.0, 5.0, 9)))
        profile = UeProfile(ue_id=ue_id, device_type=DeviceType.PHONE_5G, qci=9,
                            speed_mps=0.0, pattern=Pattern.STATIONARY)
        state = UeState(position=(0.0, 0.0), serving_cell=1)
        serving = MeasurementSample(1, serving_rsrp, -10.0, -60.0, serving_sinr, 9)
        return dataset.assemble_record(profile, state, serving, nbrs, attrs, cells, t)
    return factory
