"""Multilingual news classification experiments.

Three training setups (monolingual, multilingual, augmented) over three
subtasks: genre (multiclass, article level), framing (multilabel, article
level) and persuasion techniques (multilabel, paragraph level).
"""

__version__ = "0.1.0"
