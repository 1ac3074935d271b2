"""
Configuration profiles shipped with ffad, loaded with `ffad.config.load_profile`.
"""
