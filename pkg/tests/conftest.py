import pytest

TINY_INI = """\
[corpus]
n_langs = 2
n_tokens = 5
dim = 4
n_train = 6
n_valid = 2
n_test = 3
n_asr = 4
min_frames = 40
max_frames = 60
asr_min_frames = 20
asr_max_frames = 30
crops = 10,20

[model]
enc_hidden = 6
enc_dim = 4
pred_embed = 3
pred_hidden = 6
pred_dim = 4
joint_dim = 5
head_width = 6

[rnnt]
epochs = 1
batch_size = 4

[lid]
epochs = 1
batch_size = 4
train_crop = 30
tau = 2
"""


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY_INI, encoding="utf-8")
    return p
