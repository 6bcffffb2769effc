from recrl.env.environment import Observation, QuitRule, RecEnv, quit_triggered
from recrl.env.toy import BanditEnv, ChainEnv
from recrl.env.reward_model import MFConfig, RewardModel, predict_reward, rmse, train_reward_model

__all__ = [
    "BanditEnv", "ChainEnv", "Observation", "QuitRule", "RecEnv", "quit_triggered",
    "MFConfig", "RewardModel", "predict_reward", "rmse", "train_reward_model",
]
