"""Domain modules of the aural-visual affect pipeline"""
