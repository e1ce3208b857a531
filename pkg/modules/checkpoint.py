# SECTION: Necessary imports
import json
from pathlib import Path

from lightning.pytorch.utilities.rank_zero import rank_zero_info

from .ensemble import Ensemble
from .errors import PreconditionError
#!SECTION

# SECTION: JSON checkpoints
def save_checkpoint(ens, path):
    '''
    Envelope {config, scan_counter, next_id, experts: [{id, pis, primary_count, mean, cov,
    secondary_origin}]} with covariances stored row-major.
    '''
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', encoding='utf-8') as f:
        json.dump(ens.to_dict(), f)
        f.write('\n')
    rank_zero_info(f"Checkpoint written to {path} ({len(ens.experts)} experts, {ens.n_pi_total} PIs)")


def load_checkpoint(path):
    path = Path(path)
    with path.open('r', encoding='utf-8') as f:
        try:
            state = json.load(f)
        except json.JSONDecodeError as err:
            raise PreconditionError(f"{path}: not a JSON checkpoint ({err.msg})") from err
    try:
        return Ensemble.from_dict(state)
    except (KeyError, TypeError, AssertionError) as err:
        raise PreconditionError(f"{path}: malformed checkpoint ({err})") from err
#!SECTION
