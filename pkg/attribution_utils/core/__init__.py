"""Citation grammar, media, judges and the evaluation pipeline."""
