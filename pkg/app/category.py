# -*- coding: utf-8 -*-
from enum import Enum
from typing import Optional


class Category(Enum):
    TEXT_TO_IMAGE = "TextToImage"
    IMAGE_EDITING = "ImageEditing"
    STYLE_TRANSFER = "StyleTransfer"
    THREE_D_GENERATION = "ThreeDGeneration"
    VIDEO_EDITING_OR_GENERATION = "VideoEditingOrGeneration"
    OTHER = "Other"

    @property
    def display_name(self) -> str:
        return CATEGORY_DISPLAY[self]

    @classmethod
    def parse(cls, text: str) -> "Category":
        return _parse(cls, CATEGORY_DISPLAY, text)

    def __str__(self) -> str:
        return self.display_name


class Subcategory(Enum):
    HD_UPSCALING_RESTORATION = "HdUpscalingRestoration"
    REDRAWING = "Redrawing"
    OUTPAINTING = "Outpainting"
    CHARACTER_GUIDANCE = "CharacterGuidance"
    FACE_SWAP = "FaceSwap"
    BACKGROUND_CHANGE_REMOVE = "BackgroundChangeRemove"

    @property
    def display_name(self) -> str:
        return SUBCATEGORY_DISPLAY[self]

    @classmethod
    def parse(cls, text: str) -> "Subcategory":
        return _parse(cls, SUBCATEGORY_DISPLAY, text)

    def __str__(self) -> str:
        return self.display_name


CATEGORY_DISPLAY = {
    Category.TEXT_TO_IMAGE: "Text-to-Image Generation",
    Category.IMAGE_EDITING: "Image Editing",
    Category.STYLE_TRANSFER: "Style Transfer",
    Category.THREE_D_GENERATION: "3D Generation",
    Category.VIDEO_EDITING_OR_GENERATION: "Video Editing or Generation",
    Category.OTHER: "Others",
}

SUBCATEGORY_DISPLAY = {
    Subcategory.HD_UPSCALING_RESTORATION: "HD Upscaling/Image Restoration",
    Subcategory.REDRAWING: "Redrawing",
    Subcategory.OUTPAINTING: "Outpainting",
    Subcategory.CHARACTER_GUIDANCE: "Character-Based Guidance",
    Subcategory.FACE_SWAP: "Face Swap",
    Subcategory.BACKGROUND_CHANGE_REMOVE: "Background Change/Remove",
}


def _parse(enum_cls, display: dict, text: str):
    key = text.strip().casefold()
    for member in enum_cls:
        if key in (member.value.casefold(), display[member].casefold()):
            return member
    raise ValueError(f"unknown {enum_cls.__name__}: {text!r}")


def lookup_category(text: Optional[str]) -> Optional[Category]:
    if text is None:
        return None
    try:
        return Category.parse(text)
    except ValueError:
        return None
