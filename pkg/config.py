"""
Differentiable Entailment Configuration
Unified configuration for data generation, training, evaluation and serving
"""

import os
from typing import List

from dotenv import load_dotenv

load_dotenv()


class Settings:
    """Application configuration"""

    # Service Configuration
    SERVICE_NAME: str = "diffent"
    SERVICE_VERSION: str = "1.0.0"
    CHECKPOINT_FORMAT_VERSION: int = 1
    TOKENIZER: str = "lower-whitespace-punct"

    # Environment
    ENVIRONMENT: str = os.getenv("ENVIRONMENT", "development")
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    LOG_FORMAT: str = os.getenv("LOG_FORMAT", "console")

    # Outputs
    OUTPUT_DIR: str = os.getenv("DE_OUTPUT_DIR", "./runs")

    # Protocol
    SEED: int = int(os.getenv("DE_SEED", "7"))
    FOLDS: int = int(os.getenv("DE_FOLDS", "5"))
    K: int = int(os.getenv("DE_K", "16"))

    # Model
    VOCAB_MAX_SIZE: int = int(os.getenv("DE_VOCAB_MAX_SIZE", "512"))
    PSEUDOTOKEN_CAPACITY: int = int(os.getenv("DE_PSEUDOTOKEN_CAPACITY", "64"))
    GELU: str = os.getenv("DE_GELU", "tanh")

    # Pretraining / intermediate training
    PRETRAIN_STEPS: int = int(os.getenv("DE_PRETRAIN_STEPS", "400"))
    PRETRAIN_LR: float = float(os.getenv("DE_PRETRAIN_LR", "1e-3"))
    INTERMEDIATE_EPOCHS: int = int(os.getenv("DE_INTERMEDIATE_EPOCHS", "4"))
    INTERMEDIATE_LR: float = float(os.getenv("DE_INTERMEDIATE_LR", "1e-3"))

    # Serving
    MAX_BATCH: int = int(os.getenv("DE_MAX_BATCH", "32"))

    GELU_VARIANTS: tuple = ("tanh", "erf")
    LOG_FORMATS: tuple = ("console", "json")

    def issues(self) -> List[str]:
        """Collect configuration problems"""
        issues = []

        if self.LOG_FORMAT not in self.LOG_FORMATS:
            issues.append(f"LOG_FORMAT must be one of {self.LOG_FORMATS}, got {self.LOG_FORMAT!r}")

        if self.GELU not in self.GELU_VARIANTS:
            issues.append(f"DE_GELU must be one of {self.GELU_VARIANTS}, got {self.GELU!r}")

        for name in ("FOLDS", "K", "VOCAB_MAX_SIZE", "PRETRAIN_STEPS", "INTERMEDIATE_EPOCHS", "MAX_BATCH"):
            if getattr(self, name) <= 0:
                issues.append(f"{name} must be positive")

        if self.PSEUDOTOKEN_CAPACITY < 0:
            issues.append("DE_PSEUDOTOKEN_CAPACITY must not be negative")

        if self.VOCAB_MAX_SIZE < 5:
            issues.append("DE_VOCAB_MAX_SIZE must leave room for the 5 special tokens")

        return issues

    def validate(self) -> bool:
        """Validate configuration"""
        issues = self.issues()

        if issues:
            import structlog
            logger = structlog.get_logger(__name__)
            logger.error("configuration_invalid", issues=issues)
            return False

        return True


# Global settings instance
settings = Settings()

# Validate on import
if not settings.validate():
    if settings.ENVIRONMENT == "production":
        raise ValueError("Invalid production configuration")
    else:
        import structlog
        structlog.get_logger(__name__).warning("configuration_issues_in_development")
