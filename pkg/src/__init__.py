"""Sketch-to-saliency: saliency maps from photo-to-sketch attention."""
