import os
from dotenv import load_dotenv

load_dotenv()

class Config:
    # Default run-configuration file and seed (overridable per invocation)
    CONFIG_PATH = os.environ.get('SAVQA_CONFIG')
    LOG_LEVEL = os.environ.get('SAVQA_LOG_LEVEL') or 'INFO'
    SEED = int(os.environ.get('SAVQA_SEED') or 0)

    # Model hyper-parameters
    D_MODEL = 64
    HEADS = 4
    LAYERS = 6
    STAGE_SPLIT = (2, 2, 2)  # QuestionOnly / CrossModality / Full
    FF_WIDTH = 128
    MLP_HIDDEN = 64
    EPSILON = 1e-9
    MAX_POSITIONS = 96

    # Optimizer
    LR = 1e-3
    EPOCHS = 10
    BATCH_SIZE = 16
    SNS_LR = 1e-2
    SNS_EPOCHS = 50
    SNS_BATCH_SIZE = 16
    FREEZE_VISUAL = False

    # Data
    DATA_DIR = 'data'
    GRID_ROWS = 4
    GRID_COLS = 4
    N_SCENES = 500
    QUESTIONS_PER_SCENE = 5
    MIN_OBJECTS = 2
    MAX_OBJECTS = 5
    DETECTOR_TOP1 = 0.6
    NOISE_SIGMA = 0.1
    NEGATIVES = 5

    # Embeddings
    PROVIDER = 'hash'  # 'hash' or 'file'
    VECTORS_PATH = ''
    D_EMB = 50

    # Run
    K = 5
    VARIANT = 'full'
    FUSION = 'late'  # 'late' averages the head softmaxes, 'early' uses f_f only

class MicroConfig(Config):
    """Gradient-check sized model"""
    D_MODEL = 8
    HEADS = 2
    LAYERS = 3
    STAGE_SPLIT = (1, 1, 1)
    FF_WIDTH = 16
    MLP_HIDDEN = 8
    D_EMB = 6
    K = 3

class SmokeConfig(Config):
    D_MODEL = 16
    HEADS = 2
    LAYERS = 3
    STAGE_SPLIT = (1, 1, 1)
    FF_WIDTH = 32
    MLP_HIDDEN = 16
    D_EMB = 16
    EPOCHS = 3
    SNS_EPOCHS = 5
    N_SCENES = 10
    QUESTIONS_PER_SCENE = 5
    LR = 3e-3

config = {
    'micro': MicroConfig,
    'smoke': SmokeConfig,
    'default': Config
}
