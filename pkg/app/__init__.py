"""quadlab - question-only replay with distillation for continual visual question answering."""

__version__ = "1.0.0"
