"""Reading-strategy toolkit for multiple-choice machine reading comprehension.

Subpackages cover tokenization and tagging (text), dataset I/O and sentence
retrieval (corpus), practice-question generation (selfassess), input ordering
and highlighting (strategies), the numpy transformer (model), checkpointing
(checkpoint), staged fine-tuning and evaluation (train), ensembling
(ensemble), figures (report), and the command line (cli).
"""

__version__ = "0.1.0"
