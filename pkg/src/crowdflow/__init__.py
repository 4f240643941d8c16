"""Flow-matching trajectory prediction with group-relative post-training on social and map rewards."""
