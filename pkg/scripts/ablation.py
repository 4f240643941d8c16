"""Post-training with the social or the map reward switched off, next to the full reward."""
from posttrain_social_map import main

if __name__ == "__main__":
    main(ablations=True)
